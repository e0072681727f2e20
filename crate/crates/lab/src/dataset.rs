//! Line-delimited dataset files.
//!
//! The first line is `{"schema_version":"gas-v1"}`; every further line is one
//! transition with the fields `period_id, advertiser_id, t, state, action,
//! reward_components, done` in that order. Numbers are written as the
//! shortest decimal that parses back to the same `f64`. A JSON manifest
//! beside the records holds the counts, seed, constraint bounds and a hash
//! of the environment config.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use gas_core::data::{Dataset, DatasetManifest, Transition, SCHEMA_VERSION};
use gas_core::sim::{EnvConfig, RewardComponents, StateVector};
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::settings::env_pairs;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    schema_version: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    period_id: u64,
    advertiser_id: u64,
    t: usize,
    state: StateVector,
    action: f64,
    reward_components: RewardComponents,
    done: bool,
}

/// FNV-1a over the canonical `key = value` rendering of the config.
pub fn env_hash(env: &EnvConfig) -> String {
    let text = crate::kv::render(&env_pairs(env));
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    format!("{h:016x}")
}

pub fn write_dataset(ds: &Dataset, env: &EnvConfig, records: &Path, manifest: &Path) -> Result<DatasetManifest> {
    let file = fs::File::create(records).map_err(|e| LabError::io(records, e))?;
    let mut w = BufWriter::new(file);
    let mut line = |value: String| writeln!(w, "{value}").map_err(|e| LabError::io(records, e));
    let header = Header { schema_version: SCHEMA_VERSION.into() };
    line(serde_json::to_string(&header).map_err(|e| LabError::format(records, e))?)?;
    for tr in ds.transitions() {
        let rec = Record {
            period_id: tr.period_id,
            advertiser_id: tr.advertiser_id,
            t: tr.t,
            state: tr.state,
            action: tr.action,
            reward_components: tr.reward.clone(),
            done: tr.done,
        };
        line(serde_json::to_string(&rec).map_err(|e| LabError::format(records, e))?)?;
    }
    w.flush().map_err(|e| LabError::io(records, e))?;
    let m = ds.manifest(env_hash(env));
    write_json(manifest, &m)?;
    Ok(m)
}

pub fn read_dataset(records: &Path, manifest: &Path) -> Result<(Dataset, DatasetManifest)> {
    let m: DatasetManifest = read_json(manifest)?;
    if m.schema_version != SCHEMA_VERSION {
        return Err(LabError::format(manifest, format!("schema_version `{}`, expected `{SCHEMA_VERSION}`", m.schema_version)));
    }
    let file = fs::File::open(records).map_err(|e| LabError::io(records, e))?;
    let mut lines = BufReader::new(file).lines();
    let first = lines.next().ok_or_else(|| LabError::format(records, "empty file"))?.map_err(|e| LabError::io(records, e))?;
    let header: Header = serde_json::from_str(&first).map_err(|e| LabError::format(records, format!("line 1: {e}")))?;
    if header.schema_version != SCHEMA_VERSION {
        return Err(LabError::format(records, format!("schema_version `{}`, expected `{SCHEMA_VERSION}`", header.schema_version)));
    }
    let mut transitions = Vec::with_capacity(m.n_transitions);
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| LabError::io(records, e))?;
        let r: Record = serde_json::from_str(&line).map_err(|e| LabError::format(records, format!("line {}: {e}", i + 2)))?;
        transitions.push(Transition {
            period_id: r.period_id,
            advertiser_id: r.advertiser_id,
            t: r.t,
            state: r.state,
            action: r.action,
            reward: r.reward_components,
            done: r.done,
        });
    }
    let ds = Dataset::from_transitions(transitions, m.constraints.clone(), m.seed)?;
    if ds.trajectories.len() != m.n_trajectories || ds.n_transitions() != m.n_transitions {
        return Err(LabError::format(
            records,
            format!(
                "holds {} trajectories / {} transitions, manifest says {} / {}",
                ds.trajectories.len(),
                ds.n_transitions(),
                m.n_trajectories,
                m.n_transitions
            ),
        ));
    }
    Ok((ds, m))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| LabError::format(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| LabError::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| LabError::format(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use gas_core::data::collect_dataset;
    use gas_core::sim::ScriptedPolicy;

    #[test]
    fn round_trip_is_exact() {
        let env = EnvConfig { impressions_per_step: 30, period_length: 6, budget: 500.0, ..EnvConfig::default() };
        let ds = collect_dataset(&ScriptedPolicy::behavior_mix(&env), &env, 3, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (r, m) = (dir.path().join("d.jsonl"), dir.path().join("m.json"));
        let written = write_dataset(&ds, &env, &r, &m).unwrap();
        assert_eq!(written.n_trajectories, 15);
        let (back, manifest) = read_dataset(&r, &m).unwrap();
        assert_eq!(manifest, written);
        assert_eq!(back.trajectories.len(), ds.trajectories.len());
        for (a, b) in back.transitions().zip(ds.transitions()) {
            assert_eq!(a, b);
        }
        let first = fs::read_to_string(&r).unwrap();
        assert!(first.starts_with("{\"schema_version\":\"gas-v1\"}\n{\"period_id\":"));
    }

    #[test]
    fn wrong_schema_and_count_mismatch_are_reported() {
        let env = EnvConfig { impressions_per_step: 10, period_length: 3, budget: 100.0, ..EnvConfig::default() };
        let ds = collect_dataset(&ScriptedPolicy::behavior_mix(&env)[..1], &env, 2, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (r, m) = (dir.path().join("d.jsonl"), dir.path().join("m.json"));
        write_dataset(&ds, &env, &r, &m).unwrap();
        let text = fs::read_to_string(&r).unwrap();
        fs::write(&r, text.replace("gas-v1", "gas-v0")).unwrap();
        assert!(matches!(read_dataset(&r, &m), Err(LabError::Format { .. })));
        let truncated: Vec<&str> = text.lines().take(3).collect();
        fs::write(&r, truncated.join("\n")).unwrap();
        assert!(read_dataset(&r, &m).unwrap_err().to_string().contains("manifest says"));
    }

    #[test]
    fn hash_tracks_the_config() {
        let a = EnvConfig::default();
        let b = EnvConfig { budget: a.budget + 1.0, ..a.clone() };
        assert_eq!(env_hash(&a), env_hash(&a.clone()));
        assert_ne!(env_hash(&a), env_hash(&b));
    }
}
