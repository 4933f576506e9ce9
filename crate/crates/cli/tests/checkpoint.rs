mod common;

use equidiff_cli::train::train;
use equidiff_cli::Checkpoint;
use equidiff_core::backbone::init_params;
use equidiff_core::error::Error;
use equidiff_core::rng::SeededRng;

use common::tiny_config;

fn sample_checkpoint() -> Checkpoint {
    let config = tiny_config();
    let params = init_params(&config.model, 1).unwrap();
    let mut ema = params.clone();
    let mut rng = SeededRng::new(2);
    for (_, t) in ema.iter_mut() {
        *t = rng.normal_tensor(t.shape());
    }
    Checkpoint {
        config,
        step: 17,
        params,
        ema,
    }
}

fn checkpoint_err(r: Result<Checkpoint, Error>) -> String {
    match r {
        Err(Error::Checkpoint(msg)) => msg,
        Err(e) => panic!("expected a checkpoint error, got {e}"),
        Ok(_) => panic!("corrupt checkpoint loaded"),
    }
}

#[test]
fn round_trip_is_bit_exact() {
    let c = sample_checkpoint();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    c.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.config, c.config);
    assert_eq!(back.step, 17);
    for (set, orig) in [(&back.params, &c.params), (&back.ema, &c.ema)] {
        assert_eq!(set.len(), orig.len());
        for (name, t) in orig.iter() {
            let got = set.get(name).unwrap();
            assert_eq!(got.shape(), t.shape());
            assert!(got.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()), "{name}");
        }
    }
    assert_eq!(back.to_bytes().unwrap(), c.to_bytes().unwrap());
}

#[test]
fn header_starts_with_magic_and_version() {
    let bytes = sample_checkpoint().to_bytes().unwrap();
    assert_eq!(&bytes[..4], b"EQDF");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
}

#[test]
fn zero_step_training_gives_a_loadable_initialization() {
    let mut cfg = tiny_config();
    cfg.train.steps = 0;
    let out = train(&cfg, &[], |_| {});
    // No scenes is an error even with zero steps.
    assert!(out.is_err());

    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    equidiff_cli::commands::gen_data(&cfg, &data, 1).unwrap();
    let path = dir.path().join("m.ckpt");
    let out = equidiff_cli::commands::train_cmd(&cfg, &data, &path, |_| {}).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.step, 0);
    assert_eq!(back.params, init_params(&cfg.model, cfg.seed).unwrap());
    assert_eq!(back.ema, back.params);
    assert!(out.log.is_empty());
}

#[test]
fn config_tampering_fails_the_hash() {
    let mut bytes = sample_checkpoint().to_bytes().unwrap();
    // The config JSON starts after magic, version and its length.
    let i = 16 + bytes[16..].iter().position(|&b| b == b'3').unwrap();
    bytes[i] = b'4';
    assert!(checkpoint_err(Checkpoint::from_bytes(&bytes)).contains("config hash mismatch"));
}

#[test]
fn corrupt_payload_names_the_entry() {
    let c = sample_checkpoint();
    let mut bytes = c.to_bytes().unwrap();
    let n = bytes.len();
    // The last payload bytes belong to the last ema tensor.
    bytes[n - 3] ^= 0x40;
    let last = c.ema.names().last().unwrap().clone();
    let msg = checkpoint_err(Checkpoint::from_bytes(&bytes));
    assert!(msg.contains(&format!("entry `{last}` (ema)")), "{msg}");
    assert!(msg.contains("checksum"), "{msg}");
}

#[test]
fn truncation_and_garbage_are_rejected() {
    let bytes = sample_checkpoint().to_bytes().unwrap();
    for cut in [0, 3, 10, bytes.len() / 2, bytes.len() - 1] {
        checkpoint_err(Checkpoint::from_bytes(&bytes[..cut]));
    }
    let mut longer = bytes.clone();
    longer.push(0);
    assert!(checkpoint_err(Checkpoint::from_bytes(&longer)).contains("trailing"));
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(checkpoint_err(Checkpoint::from_bytes(&magic)).contains("magic"));
    let mut version = bytes;
    version[4] = 9;
    assert!(checkpoint_err(Checkpoint::from_bytes(&version)).contains("version"));
}

#[test]
fn tensors_must_match_the_configured_model() {
    let mut c = sample_checkpoint();
    let name = c.params.names().next().unwrap().clone();
    c.params.insert("stray.weight", c.params.get(&name).unwrap().clone());
    c.ema.insert("stray.weight", c.ema.get(&name).unwrap().clone());
    let msg = checkpoint_err(Checkpoint::from_bytes(&c.to_bytes().unwrap()));
    assert!(msg.contains("entry `stray.weight`"), "{msg}");

    let mut c = sample_checkpoint();
    c.config.model.layers = 3;
    let msg = checkpoint_err(Checkpoint::from_bytes(&c.to_bytes().unwrap()));
    assert!(msg.contains("missing"), "{msg}");
}

#[test]
fn missing_file_is_a_checkpoint_error() {
    let dir = tempfile::tempdir().unwrap();
    let msg = checkpoint_err(Checkpoint::load(&dir.path().join("nope.ckpt")));
    assert!(msg.contains("nope.ckpt"), "{msg}");
}
