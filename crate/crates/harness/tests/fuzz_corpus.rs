//! Replays the fuzz corpus seeds, plus deterministic single-byte mutations of
//! each, through the same invariants the fuzz targets check.

use std::path::PathBuf;

use diffusion::Checkpoint;
use harness::runlog::{parse_runlog, write_runlog, Table};
use harness::ExperimentConfig;

fn seeds(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<(String, Vec<u8>)> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

/// The seed itself, then copies with one byte changed at evenly spaced positions.
fn variants(bytes: &[u8]) -> Vec<Vec<u8>> {
    let mut out = vec![bytes.to_vec()];
    let step = (bytes.len() / 64).max(1);
    for i in (0..bytes.len()).step_by(step) {
        for b in [0u8, b'9', b',', b'\n', 0xff] {
            let mut v = bytes.to_vec();
            v[i] = b;
            out.push(v);
        }
        out.push([&bytes[..i], &bytes[i + 1..]].concat());
    }
    out
}

fn config_invariant(data: &[u8]) {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = ExperimentConfig::parse(text) {
        let canonical = cfg.canonical();
        let again = ExperimentConfig::parse(&canonical).expect("canonical form parses");
        assert_eq!(again, cfg);
        assert_eq!(again.canonical(), canonical);
    }
}

fn checkpoint_invariant(data: &[u8]) {
    if let Ok(ckpt) = Checkpoint::decode(data) {
        let bytes = ckpt.encode();
        assert_eq!(Checkpoint::decode(&bytes).expect("canonical encoding decodes").encode(), bytes);
    }
}

fn runlog_invariant(data: &[u8]) {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let _ = Table::parse(text);
    if let Ok(rows) = parse_runlog(text) {
        let written = write_runlog(&rows).expect("parsed rows serialise");
        let back = parse_runlog(&written).expect("written log parses");
        assert_eq!(write_runlog(&back).expect("reserialise"), written);
    }
}

#[test]
fn config_seeds() {
    let seeds = seeds("config_parser");
    let accepted = seeds.iter().filter(|(_, b)| ExperimentConfig::parse(std::str::from_utf8(b).unwrap()).is_ok()).count();
    assert!(accepted >= 2 && accepted < seeds.len(), "seeds should mix valid and invalid input");
    for (_, s) in &seeds {
        variants(s).iter().for_each(|v| config_invariant(v));
    }
}

#[test]
fn checkpoint_seeds() {
    let seeds = seeds("checkpoint_decoder");
    for (name, s) in &seeds {
        if !name.starts_with("truncated") && !name.starts_with("future") {
            let ckpt = Checkpoint::decode(s).unwrap_or_else(|e| panic!("{name}: {e}"));
            assert_eq!(&ckpt.encode(), s, "{name}");
        }
        variants(s).iter().for_each(|v| checkpoint_invariant(v));
    }
}

#[test]
fn runlog_seeds() {
    for (name, s) in &seeds("runlog_parser") {
        if name.starts_with("tiny_run") || name.starts_with("hand_written") {
            assert!(parse_runlog(std::str::from_utf8(s).unwrap()).is_ok(), "{name}");
        }
        variants(s).iter().for_each(|v| runlog_invariant(v));
    }
}
