//! Replays the checked-in fuzz corpus, plus deterministic mutations of every
//! seed, through the same checks the fuzz targets make.

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splatseg::autodiff::Checkpoint;
use splatseg::config::Settings;
use splatseg::data::parse_manifest;
use splatseg::raster::{decode_pgm, decode_ppm, decode_slm, encode_slm};
use splatseg::scene::io::{
    decode_dense_map, decode_point_cloud, decode_scene, encode_dense_map, encode_scene, parse_camera,
    parse_vocabulary,
};

/// Returns whether the input was accepted; panics on a broken invariant.
fn check(target: &str, data: &[u8]) -> bool {
    let text = std::str::from_utf8(data);
    match target {
        "decode_scene" => decode_scene(data)
            .map(|s| {
                assert!(s.validate().is_ok());
                let again = decode_scene(&encode_scene(&s).unwrap()).unwrap();
                assert_eq!(again.len(), s.len());
            })
            .is_ok(),
        "decode_point_cloud" => decode_point_cloud(data).map(|c| assert!(c.validate().is_ok())).is_ok(),
        "decode_dense_map" => decode_dense_map(data).map(|m| assert_eq!(encode_dense_map(&m), data)).is_ok(),
        "decode_checkpoint" => Checkpoint::decode(data).map(|c| assert_eq!(c.encode().unwrap(), data)).is_ok(),
        "decode_ppm" => decode_ppm(data)
            .map(|i| assert_eq!(i.data.len(), i.width as usize * i.height as usize * 3))
            .is_ok(),
        "decode_pgm" => decode_pgm(data)
            .map(|i| assert_eq!(i.labels.len(), i.width as usize * i.height as usize))
            .is_ok(),
        "decode_slm" => decode_slm(data).map(|i| assert_eq!(encode_slm(&i), data)).is_ok(),
        "parse_camera" => text.is_ok_and(|t| parse_camera(t).map(|c| assert!(c.validate().is_ok())).is_ok()),
        "parse_vocabulary" => text.is_ok_and(|t| parse_vocabulary(t).map(|v| assert_eq!(v.names().len(), v.len())).is_ok()),
        "parse_manifest" => text.is_ok_and(|t| parse_manifest(t).is_ok()),
        "parse_config" => text.is_ok_and(|t| {
            let mut s = Settings::default();
            if s.merge_json(t).is_err() {
                return false;
            }
            let mut echoed: serde_json::Map<String, serde_json::Value> = serde_json::from_str(&s.to_json()).unwrap();
            echoed.retain(|_, v| !v.is_null());
            let mut back = Settings::default();
            back.merge_json(&serde_json::Value::Object(echoed).to_string()).unwrap();
            assert_eq!(back, s);
            true
        }),
        other => panic!("no check for corpus directory {other}"),
    }
}

fn mutate(rng: &mut ChaCha8Rng, seed: &[u8]) -> Vec<u8> {
    let mut b = seed.to_vec();
    for _ in 0..rng.gen_range(1..4) {
        match rng.gen_range(0..4) {
            0 if !b.is_empty() => {
                let i = rng.gen_range(0..b.len());
                b[i] ^= 1 << rng.gen_range(0..8);
            }
            1 if !b.is_empty() => b.truncate(rng.gen_range(0..b.len())),
            2 => {
                let i = rng.gen_range(0..=b.len());
                b.insert(i, rng.gen());
            }
            _ if !b.is_empty() => {
                let i = rng.gen_range(0..b.len());
                b[i] = [0, 0xff, b'0', b'-', b'"', b'\n'][rng.gen_range(0..6)];
            }
            _ => {}
        }
    }
    b
}

#[test]
fn corpus_seeds_parse_and_mutations_never_panic() {
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus");
    let mut dirs: Vec<_> = std::fs::read_dir(&root).unwrap().map(|e| e.unwrap().path()).collect();
    dirs.sort();
    assert_eq!(dirs.len(), 11);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for dir in dirs {
        let target = dir.file_name().unwrap().to_string_lossy().into_owned();
        let mut seeds = 0;
        for file in std::fs::read_dir(&dir).unwrap() {
            let path = file.unwrap().path();
            let bytes = std::fs::read(&path).unwrap();
            assert!(check(&target, &bytes), "seed {} is rejected", path.display());
            for _ in 0..300 {
                check(&target, &mutate(&mut rng, &bytes));
            }
            seeds += 1;
        }
        assert!(seeds > 0, "{target} has no seeds");
    }
}
