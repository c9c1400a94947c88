//! Byte-stable dataset generation, lossless checkpoints and the golden
//! match CSV.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use topicmatch::checkpoint::{decode, encode, load_checkpoint, restore_model, restore_optimizer, save_checkpoint, TensorData, FORMAT_VERSION};
use topicmatch::model::{Model, ModelConfig};
use topicmatch::optim::Adam;
use topicmatch::synth_data::{build_dataset, generate_scene_pair, sha256_hex, SceneParams};
use topicmatch::topic_matcher::Variant;
use topicmatch::trainer::{TrainConfig, Trainer};
use topicmatch_cli::{golden, run_cli};

use crate::Check;

const DATASET_SEED: u64 = 17;

/// Relative path to SHA-256 of every file under `root`.
pub fn tree_hashes(root: &Path) -> anyhow::Result<BTreeMap<String, String>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) -> anyhow::Result<()> {
        for entry in fs::read_dir(dir)? {
            let path = entry?.path();
            if path.is_dir() {
                walk(root, &path, out)?;
            } else {
                let rel = path.strip_prefix(root)?.to_string_lossy().into_owned();
                out.insert(rel, sha256_hex(&fs::read(&path)?));
            }
        }
        Ok(())
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out)?;
    Ok(out)
}

fn dataset_check(dir: &Path) -> anyhow::Result<Check> {
    let params = SceneParams { height: 64, width: 64, ..SceneParams::default() };
    let (a, b) = (dir.join("run1"), dir.join("run2"));
    build_dataset(3, &a, &params, DATASET_SEED)?;
    build_dataset(3, &b, &params, DATASET_SEED)?;
    let (ha, hb) = (tree_hashes(&a)?, tree_hashes(&b)?);
    Ok(Check::new(
        "two dataset builds with one seed are byte-identical",
        format!("{} files, {}", ha.len(), if ha == hb { "all hashes equal" } else { "hashes differ" }),
        ha == hb && !ha.is_empty(),
    ))
}

fn snapshot(model: &Model, adam: &Adam) -> anyhow::Result<BTreeMap<String, Vec<u8>>> {
    let mut out = BTreeMap::new();
    for (name, v) in model.store.params().iter().chain(model.store.buffers()) {
        out.insert(name.clone(), TensorData::from_tensor(v.as_tensor())?.bytes);
    }
    for (k, name) in adam.names.iter().enumerate() {
        out.insert(format!("m/{name}"), TensorData::from_tensor(&adam.m[k])?.bytes);
        out.insert(format!("v/{name}"), TensorData::from_tensor(&adam.v[k])?.bytes);
    }
    Ok(out)
}

fn tamper_version(path: &Path) -> anyhow::Result<()> {
    let mut bytes = fs::read(path)?;
    bytes[8..12].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
    fs::write(path, bytes)?;
    Ok(())
}

fn checkpoint_checks(dir: &Path, tamper: bool) -> anyhow::Result<Vec<Check>> {
    let params = SceneParams { height: 64, width: 64, ..SceneParams::default() };
    let data = (0..2).map(|i| Ok((i, generate_scene_pair(40 + i as u64, &params)?))).collect::<anyhow::Result<Vec<_>>>()?;
    let cfg = TrainConfig { model: ModelConfig::tiny(Variant::Plus), epochs: 1, validate_every: 0, ..TrainConfig::default() };
    let mut trainer = Trainer::new(cfg.clone())?;
    trainer.run(&data, &[], None)?;
    let path = dir.join("trained.ckpt");
    save_checkpoint(&path, &trainer.model, Some(&trainer.adam), trainer.step)?;
    let mut checks = Vec::new();

    let bytes = fs::read(&path)?;
    let state = decode(&bytes)?;
    let tensors: Vec<(String, TensorData)> = state.header.tensors.iter().map(|e| (e.name.clone(), state.tensors[&e.name].clone())).collect();
    let again = encode(&state.header.model, state.header.step, &tensors)?;
    checks.push(Check::new("decode then encode reproduces the file", format!("{} bytes", bytes.len()), again == bytes));

    let rejected = dir.join("rejected.ckpt");
    fs::copy(&path, &rejected)?;
    tamper_version(&rejected)?;
    let outcome = load_checkpoint(&rejected);
    checks.push(Check::new(
        "a file with a bumped format version is rejected",
        match &outcome {
            Ok(_) => "loaded".to_string(),
            Err(e) => e.to_string(),
        },
        outcome.is_err(),
    ));

    if tamper {
        tamper_version(&path)?;
    }
    let expected = snapshot(&trainer.model, &trainer.adam)?;
    let restored = (|| -> anyhow::Result<BTreeMap<String, Vec<u8>>> {
        let state = load_checkpoint(&path)?;
        let fresh = Trainer::from_model(Model::new(cfg.model.clone(), cfg.seed + 99)?, cfg.clone())?;
        let (model, mut adam) = (fresh.model, fresh.adam);
        restore_model(&model, &state, false)?;
        restore_optimizer(&mut adam, &state)?;
        snapshot(&model, &adam)
    })();
    checks.push(match restored {
        Ok(got) => {
            let differing = expected.iter().filter(|(k, v)| got.get(*k) != Some(*v)).count();
            Check::new(
                "checkpoint reload restores parameters, buffers and optimizer state bitwise",
                format!("{} tensors, {differing} differ", expected.len()),
                differing == 0 && got.len() == expected.len(),
            )
        }
        Err(e) => Check::new("checkpoint reload restores parameters, buffers and optimizer state bitwise", format!("load failed: {e}"), false),
    });
    Ok(checks)
}

fn golden_check(dir: &Path) -> anyhow::Result<Check> {
    let (ckpt, a, b) = golden::write_fixture(dir);
    let out = dir.join("match");
    let s = |p: &Path| p.to_string_lossy().into_owned();
    let code = run_cli(["topicmatch", "match", &s(&a), &s(&b), "--checkpoint", &s(&ckpt), "--out", &s(&out), "--tau", golden::TAU]);
    anyhow::ensure!(code == 0, "match exited with code {code}");
    let got = fs::read(out.join("matches.csv"))?;
    let want = fs::read(golden::golden_path())?;
    Ok(Check::new(
        "match CSV equals the committed golden file",
        format!("{} rows", got.iter().filter(|&&c| c == b'\n').count().saturating_sub(1)),
        got == want,
    ))
}

pub fn run(tamper: bool) -> anyhow::Result<Vec<Check>> {
    let dir = tempfile::tempdir()?;
    let mut checks = vec![dataset_check(dir.path())?];
    checks.extend(checkpoint_checks(dir.path(), tamper)?);
    checks.push(golden_check(dir.path())?);
    Ok(checks)
}
