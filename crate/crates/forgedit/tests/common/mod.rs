#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use forgedit::config::LayoutName;
use forgedit::imageio;
use forgedit::Model;
use forgedit_core::finetune::PretrainConfig;

pub const BIN: &str = env!("CARGO_BIN_EXE_forgedit");

/// A briefly trained tiny model saved under `dir/model`.
pub fn tiny_model(dir: &Path) -> PathBuf {
    let cfg = PretrainConfig { steps: 20, batch: 4, ..PretrainConfig::default() };
    let (model, trace) = Model::pretrain(LayoutName::Tiny.layout(), 20, &cfg, None).unwrap();
    let out = dir.join("model");
    model.save(&out, &trace).unwrap();
    out
}

pub fn fixture_png(dir: &Path) -> PathBuf {
    let (img, _) = forgedit_core::fixtures::edit_fixture();
    let p = dir.join("edit.png");
    imageio::write(&img, &p).unwrap();
    p
}

pub fn forgedit(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env_remove("FORGEDIT_CONFIG").env("RUST_LOG", "warn").output().unwrap()
}

/// `key=value` pairs of the last stdout line.
pub fn summary(out: &Output) -> Vec<(String, String)> {
    let text = String::from_utf8_lossy(&out.stdout);
    let line = text.lines().last().unwrap_or_default().to_string();
    let mut pairs = Vec::new();
    let mut rest = line.as_str();
    while let Some((k, v)) = rest.split_once('=') {
        let k = k.trim().to_string();
        let (value, tail) = if let Some(q) = v.strip_prefix('"') {
            let end = q.find('"').unwrap();
            (q[..end].to_string(), &q[end + 1..])
        } else {
            let end = v.find(' ').unwrap_or(v.len());
            (v[..end].to_string(), &v[end..])
        };
        pairs.push((k, value));
        rest = tail;
    }
    pairs
}

pub fn get<'a>(pairs: &'a [(String, String)], key: &str) -> &'a str {
    &pairs.iter().find(|(k, _)| k == key).unwrap_or_else(|| panic!("no {key} in {pairs:?}")).1
}

pub fn files(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> =
        std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    v.sort();
    v
}
