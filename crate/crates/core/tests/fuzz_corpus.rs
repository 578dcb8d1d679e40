//! Replays the fuzz corpus plus seeded mutations of it through every
//! decoder, so the parsers get exercised on a stable toolchain too.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use srctrace::config::RunConfig;
use srctrace::dataio::{
    decode_embeddings, decode_logits, encode_embeddings, encode_logits, Manifest,
};
use srctrace::ood::NsdModel;
use srctrace::trainer::Checkpoint;

const MUTATIONS: usize = 3000;

fn seeds(target: &str) -> Vec<Vec<u8>> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../fuzz/corpus")
        .join(target);
    let mut paths: Vec<_> = fs::read_dir(&dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    paths.sort();
    let out: Vec<Vec<u8>> = paths.iter().map(|p| fs::read(p).unwrap()).collect();
    assert!(!out.is_empty(), "no seeds in {}", dir.display());
    out
}

fn mutate(seed: &[u8], rng: &mut ChaCha8Rng) -> Vec<u8> {
    let mut b = seed.to_vec();
    for _ in 0..rng.random_range(1..4) {
        match rng.random_range(0..5) {
            0 if !b.is_empty() => {
                let i = rng.random_range(0..b.len());
                b[i] ^= 1 << rng.random_range(0..8);
            }
            1 if !b.is_empty() => {
                let i = rng.random_range(0..b.len());
                b[i] = [0x00, 0xff, 0x7f, 0x80][rng.random_range(0..4)];
            }
            2 => b.truncate(rng.random_range(0..=b.len())),
            3 => {
                let i = rng.random_range(0..=b.len());
                b.insert(i, rng.random());
            }
            _ if b.len() >= 4 => {
                // overwrite a little-endian word, where the counts live
                let i = rng.random_range(0..=b.len() - 4);
                let v: u32 = [0, 1, u32::MAX, 0x7fff_ffff, rng.random()][rng.random_range(0..5)];
                b[i..i + 4].copy_from_slice(&v.to_le_bytes());
            }
            _ => {}
        }
    }
    b
}

fn drive(target: &str, check: impl Fn(&[u8])) {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let corpus = seeds(target);
    for s in &corpus {
        check(s);
    }
    for _ in 0..MUTATIONS {
        let s = &corpus[rng.random_range(0..corpus.len())];
        check(&mutate(s, &mut rng));
    }
}

#[test]
fn embeddings_decoder() {
    drive("decode_embeddings", |data| {
        if let Ok(set) = decode_embeddings(data) {
            assert_eq!(encode_embeddings(&set).unwrap(), data);
        }
    });
}

#[test]
fn logits_decoder() {
    drive("decode_logits", |data| {
        if let Ok(set) = decode_logits(data) {
            assert_eq!(encode_logits(&set).unwrap(), data);
        }
    });
}

#[test]
fn manifest_parser() {
    drive("manifest", |data| {
        if let Ok(m) = std::str::from_utf8(data)
            .map_err(|_| ())
            .and_then(|t| Manifest::parse(t).map_err(|_| ()))
        {
            assert_eq!(Manifest::parse(&m.to_jsonl()).unwrap(), m);
        }
    });
}

#[test]
fn checkpoint_decoder() {
    drive("checkpoint", |data| {
        if let Ok(c) = Checkpoint::decode(data) {
            assert_eq!(c.encode().unwrap(), data);
        }
    });
}

#[test]
fn detector_decoder() {
    drive("nsd_model", |data| {
        if let Ok(m) = NsdModel::decode(data) {
            assert_eq!(m.encode().unwrap(), data);
        }
    });
}

#[test]
fn config_parser() {
    drive("run_config", |data| {
        if let Ok(text) = std::str::from_utf8(data) {
            let _ = RunConfig::parse(text);
        }
    });
}
