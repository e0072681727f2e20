//! Named-tensor checkpoint files.
//!
//! ```text
//! GAS-CKPT 1
//! kind <policy|critic>
//! meta <one-line JSON>
//! tensors <count>
//! tensor <name> <d0>x<d1>...
//! <values, space separated>
//! ...
//! end
//! ```
//!
//! Tensor values are written in `{:e}` notation, the shortest decimal that
//! parses back to the identical `f64`, so files are plain text, byte-stable
//! and portable across platforms.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use gas_core::approx::{AttentionScope, ParameterSet};
use gas_core::critic::{CriticEnsemble, CriticMember, PreferenceSpec};
use gas_core::encode::{ArchConfig, Encoder};
use gas_core::policy::DtPolicy;
use serde::{Deserialize, Serialize};

use crate::dataset::{read_json, write_json};
use crate::error::{LabError, Result};

const MAGIC: &str = "GAS-CKPT 1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: String,
    pub tensors: Vec<(String, Vec<usize>, Vec<f64>)>,
}

impl Checkpoint {
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{MAGIC}\nkind {}\nmeta {}\ntensors {}", self.kind, self.meta, self.tensors.len());
        for (name, shape, values) in &self.tensors {
            let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
            let _ = writeln!(out, "tensor {name} {}", dims.join("x"));
            let vals: Vec<String> = values.iter().map(|v| format!("{v:e}")).collect();
            let _ = writeln!(out, "{}", vals.join(" "));
        }
        out.push_str("end\n");
        out
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let err = |msg: String| LabError::format(path, msg);
        let mut lines = text.lines();
        let mut next = |what: &str| lines.next().ok_or_else(|| err(format!("truncated before {what}")));
        if next("header")? != MAGIC {
            return Err(err(format!("missing `{MAGIC}` header")));
        }
        let field = |line: &str, name: &str| -> Result<String> {
            line.strip_prefix(name)
                .and_then(|r| r.strip_prefix(' '))
                .map(str::to_string)
                .ok_or_else(|| err(format!("expected `{name}` line")))
        };
        let kind = field(next("kind")?, "kind")?;
        let meta = field(next("meta")?, "meta")?;
        let count: usize = field(next("tensors")?, "tensors")?.parse().map_err(|_| err("bad tensor count".into()))?;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let head = field(next("tensor")?, "tensor")?;
            let (name, dims) = head.split_once(' ').ok_or_else(|| err(format!("bad tensor line `{head}`")))?;
            let shape: Vec<usize> =
                dims.split('x').map(|d| d.parse()).collect::<std::result::Result<_, _>>().map_err(|_| err(format!("bad shape `{dims}`")))?;
            let body = next("values")?;
            let values: Vec<f64> = if body.is_empty() {
                Vec::new()
            } else {
                body.split(' ').map(|v| v.parse()).collect::<std::result::Result<_, _>>().map_err(|_| err(format!("bad value in `{name}`")))?
            };
            if values.len() != shape.iter().product::<usize>() {
                return Err(err(format!("tensor `{name}` has {} values for shape {dims}", values.len())));
            }
            tensors.push((name.to_string(), shape, values));
        }
        if next("end")? != "end" {
            return Err(err("missing `end`".into()));
        }
        Ok(Checkpoint { kind, meta, tensors })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.render()).map_err(|e| LabError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        Self::parse(&text, path)
    }

    fn expect_kind(&self, kind: &str, path: &Path) -> Result<()> {
        if self.kind != kind {
            return Err(LabError::format(path, format!("checkpoint kind `{}`, expected `{kind}`", self.kind)));
        }
        Ok(())
    }

    fn meta<T: for<'de> Deserialize<'de>>(&self, path: &Path) -> Result<T> {
        serde_json::from_str(&self.meta).map_err(|e| LabError::format(path, format!("meta: {e}")))
    }

    fn push_params(&mut self, prefix: &str, p: &ParameterSet) {
        for t in &p.tensors {
            let values = p.values[t.offset..t.offset + t.numel()].to_vec();
            self.tensors.push((format!("{prefix}{}", t.name), t.shape.clone(), values));
        }
    }

    fn params(&self, prefix: &str) -> ParameterSet {
        let mut p = ParameterSet::new();
        for (name, shape, values) in &self.tensors {
            if let Some(n) = name.strip_prefix(prefix) {
                p.push(n, shape.clone(), values.clone());
            }
        }
        p
    }
}

fn to_meta<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("metadata serializes")
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PolicyMeta {
    arch: ArchConfig,
    encoder: Encoder,
    preference: PreferenceSpec,
    constraints: Vec<f64>,
    gamma: f64,
    rtg_target: f64,
    action_bounds: (f64, f64),
}

pub fn save_policy(p: &DtPolicy, path: &Path) -> Result<()> {
    let meta = PolicyMeta {
        arch: p.arch,
        encoder: p.encoder.clone(),
        preference: p.preference,
        constraints: p.constraints.clone(),
        gamma: p.gamma,
        rtg_target: p.rtg_target,
        action_bounds: p.action_bounds,
    };
    let mut ck = Checkpoint { kind: "policy".into(), meta: to_meta(&meta), tensors: Vec::new() };
    ck.push_params("", &p.params);
    ck.write(path)
}

pub fn load_policy(path: &Path) -> Result<DtPolicy> {
    let ck = Checkpoint::read(path)?;
    ck.expect_kind("policy", path)?;
    let m: PolicyMeta = ck.meta(path)?;
    let params = ck.params("");
    params.validate()?;
    Ok(DtPolicy::new(m.arch, m.encoder, params, m.preference, m.constraints, m.gamma, m.rtg_target, m.action_bounds)?)
}

#[derive(Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
struct CriticMeta {
    preference: PreferenceSpec,
    arch: ArchConfig,
    v_scope: AttentionScope,
    encoder: Encoder,
    reward_scale: f64,
    seed: u64,
}

/// Lists the members of one preference's ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleManifest {
    pub preference: PreferenceSpec,
    pub arch: ArchConfig,
    pub reward_scale: f64,
    pub members: Vec<EnsembleMember>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleMember {
    pub seed: u64,
    pub file: String,
}

pub fn critic_file_name(preference: &PreferenceSpec, seed: u64) -> String {
    format!("critic_{}_{seed}.ckpt", preference.kind.as_str())
}

pub fn ensemble_manifest_name(preference: &PreferenceSpec) -> String {
    format!("ensemble_{}.json", preference.kind.as_str())
}

/// Writes one file per member plus the manifest; returns the manifest path.
pub fn save_ensemble(ens: &CriticEnsemble, dir: &Path) -> Result<PathBuf> {
    let mut members = Vec::with_capacity(ens.len());
    for m in &ens.members {
        let meta = CriticMeta {
            preference: ens.preference,
            arch: ens.arch,
            v_scope: ens.v_scope,
            encoder: ens.encoder.clone(),
            reward_scale: ens.reward_scale,
            seed: m.seed,
        };
        let mut ck = Checkpoint { kind: "critic".into(), meta: to_meta(&meta), tensors: Vec::new() };
        ck.push_params("q/", &m.q);
        ck.push_params("q_target/", &m.q_target);
        ck.push_params("v/", &m.v);
        let file = critic_file_name(&ens.preference, m.seed);
        ck.write(&dir.join(&file))?;
        members.push(EnsembleMember { seed: m.seed, file });
    }
    let manifest = EnsembleManifest { preference: ens.preference, arch: ens.arch, reward_scale: ens.reward_scale, members };
    let path = dir.join(ensemble_manifest_name(&ens.preference));
    write_json(&path, &manifest)?;
    Ok(path)
}

pub fn load_ensemble(manifest_path: &Path) -> Result<CriticEnsemble> {
    let manifest: EnsembleManifest = read_json(manifest_path)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let mut shared: Option<CriticMeta> = None;
    let mut members = Vec::with_capacity(manifest.members.len());
    for entry in &manifest.members {
        let path = dir.join(&entry.file);
        let ck = Checkpoint::read(&path)?;
        ck.expect_kind("critic", &path)?;
        let meta: CriticMeta = ck.meta(&path)?;
        if meta.seed != entry.seed || meta.preference != manifest.preference || meta.arch != manifest.arch {
            return Err(LabError::format(&path, "member does not match the ensemble manifest"));
        }
        let member = CriticMember { seed: meta.seed, q: ck.params("q/"), q_target: ck.params("q_target/"), v: ck.params("v/") };
        for p in [&member.q, &member.q_target, &member.v] {
            p.validate()?;
        }
        members.push(member);
        match &shared {
            None => shared = Some(meta),
            Some(s) if s.encoder != meta.encoder || s.v_scope != meta.v_scope || s.reward_scale != meta.reward_scale => {
                return Err(LabError::format(&path, "members disagree on encoder or value settings"));
            }
            Some(_) => {}
        }
    }
    let meta = shared.ok_or_else(|| LabError::format(manifest_path, "ensemble has no members"))?;
    Ok(CriticEnsemble::new(meta.preference, meta.arch, meta.v_scope, meta.encoder, meta.reward_scale, members)?)
}
