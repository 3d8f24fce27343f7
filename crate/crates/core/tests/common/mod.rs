//! Shared fixtures for the integration and acceptance tests.
#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::json;
use tempfile::TempDir;

pub fn toy_corpus() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/toy")
}

pub const ARCHES: [&str; 2] = ["x86_64", "aarch64"];
pub const OSES: [&str; 2] = ["centos7", "ubuntu22"];
pub const SITES: [&str; 2] = ["siteA", "siteB"];

/// A scratch deployment: config file, work, trees and repo under one tempdir.
pub struct Fixture {
    pub dir: TempDir,
    pub config: PathBuf,
}

impl Fixture {
    pub fn new() -> Self {
        Self::with_ops_tests(json!([]))
    }

    pub fn with_ops_tests(ops: serde_json::Value) -> Self {
        Self::build(toy_corpus(), ops, 4)
    }

    pub fn build(corpus: PathBuf, ops: serde_json::Value, width: usize) -> Self {
        let dir = TempDir::new().unwrap();
        let config = dir.path().join("rade.config.json");
        let body = json!({
            "corpus_root": corpus,
            "workdir": "work",
            "integration_root": "integration",
            "deploy_root": "deploy",
            "repo_path": "repo",
            "matrix": {"arches": ARCHES, "oses": OSES, "sites": SITES},
            "ops_tests": ops,
            "width": width,
            "phase_timeout_s": 60,
        });
        fs::write(&config, serde_json::to_string_pretty(&body).unwrap()).unwrap();
        Fixture { dir, config }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    pub fn repo(&self) -> PathBuf {
        self.path("repo")
    }

    /// Writes an event touching `paths` and returns its location.
    pub fn event(&self, id: &str, paths: &[&str]) -> PathBuf {
        let p = self.path(&format!("{id}.event.json"));
        let body = json!({"event_id": id, "changed_paths": paths, "timestamp": 1_700_000_000});
        fs::write(&p, body.to_string()).unwrap();
        p
    }

    /// Runs the `rade` binary with this fixture's config.
    pub fn rade(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_rade"))
            .arg("--config")
            .arg(&self.config)
            .args(args)
            .env_remove("RADE_CONFIG")
            .output()
            .unwrap()
    }
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn all_targets() -> Vec<String> {
    let mut out = Vec::new();
    for a in ARCHES {
        for o in OSES {
            for s in SITES {
                out.push(format!("{a}-{o}-{s}"));
            }
        }
    }
    out.sort();
    out
}

/// Copies a directory tree, keeping permission bits.
pub fn copy_tree(from: &Path, to: &Path) {
    for entry in walkdir::WalkDir::new(from) {
        let entry = entry.unwrap();
        let dest = to.join(entry.path().strip_prefix(from).unwrap());
        if entry.file_type().is_dir() {
            fs::create_dir_all(&dest).unwrap();
        } else {
            fs::copy(entry.path(), &dest).unwrap();
        }
    }
}

/// Script bodies for a synthetic recipe; `None` uses a trivial passing body.
#[derive(Default, Clone)]
pub struct Scripts<'a> {
    pub build: Option<&'a str>,
    pub check: Option<&'a str>,
    pub deploy: Option<&'a str>,
    pub mve: Option<&'a str>,
}

/// Writes `<root>/<name>/<version>/` with a one-line source bundle and
/// scripts that install `bin/<name>` printing `<name> <version>`.
pub fn write_recipe(root: &Path, name: &str, version: &str, deps: &[(&str, &str)], s: Scripts) {
    let dir = root.join(name).join(version);
    fs::create_dir_all(dir.join("tests")).unwrap();
    let bundle = format!("#!/bin/sh\necho \"{name} {version}\"\n");
    fs::write(dir.join("src.sh"), &bundle).unwrap();
    let build = format!("set -e\ncp \"$SOURCE_BUNDLE\" {name}\nchmod 755 {name}\n");
    let check = format!("set -e\nmkdir -p \"$INSTALL_PREFIX/bin\"\ncp {name} \"$INSTALL_PREFIX/bin/{name}\"\n");
    let deploy = format!("set -e\nmkdir -p \"$DEPLOY_PREFIX/bin\"\ncp {name} \"$DEPLOY_PREFIX/bin/{name}\"\n");
    let mve = format!("[ \"$({name})\" = \"{name} {version}\" ]\n");
    fs::write(dir.join("build.sh"), s.build.map_or(build, str::to_string)).unwrap();
    fs::write(dir.join("check.sh"), s.check.map_or(check, str::to_string)).unwrap();
    fs::write(dir.join("deploy.sh"), s.deploy.map_or(deploy, str::to_string)).unwrap();
    fs::write(dir.join("tests/mve.sh"), s.mve.map_or(mve, str::to_string)).unwrap();
    let sha = rade_core::repo::sha256_hex(bundle.as_bytes());
    let deps: Vec<_> = deps.iter().map(|(n, c)| json!({"name": n, "constraint": c})).collect();
    let manifest = json!({
        "name": name,
        "version": version,
        "source": {"url": "file:src.sh", "sha256": sha},
        "dependencies": deps,
        "scripts": {"build": "build.sh", "check": "check.sh", "deploy": "deploy.sh"},
        "researcher_tests": ["tests/mve.sh"],
    });
    fs::write(dir.join("rade.json"), serde_json::to_string_pretty(&manifest).unwrap()).unwrap();
}

/// Sorted (relative path, bytes) listing of a directory tree.
pub fn snapshot(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out: Vec<_> = walkdir::WalkDir::new(root)
        .sort_by_file_name()
        .into_iter()
        .map(|e| e.unwrap())
        .map(|e| {
            let rel = e.path().strip_prefix(root).unwrap().to_path_buf();
            let bytes = if e.file_type().is_file() { fs::read(e.path()).unwrap() } else { Vec::new() };
            (rel, bytes)
        })
        .collect();
    out.sort();
    out
}
