//! Experiment manifests: a sectioned key=value file naming a profile and a
//! list of runs.  Every run record stores the hash of the manifest that
//! launched it, so results stay traceable to the exact request.
//!
//! ```text
//! [manifest]
//! profile = smoke
//! out = results
//!
//! [run]
//! task = copy
//! model = panm
//! Ha = 2
//! Hc = 1
//! seeds = 1,2,3
//! ```
//!
//! Inline flags build the same structure in memory and hash its canonical
//! rendering, so flag-launched records are traceable too.

use std::path::PathBuf;

use panm_core::harness::RunConfig;
use panm_core::textio::{KvDoc, KvSection};
use sha2::{Digest, Sha256};

use crate::profiles::{profile, resolve, Profile, RunSpec};
use crate::{usage, Failure};

#[derive(Debug)]
pub struct Manifest {
    pub profile: &'static Profile,
    pub out: Option<PathBuf>,
    pub checkpoints: bool,
    pub specs: Vec<RunSpec>,
    /// SHA-256 of the manifest text, recorded in every run it launches.
    pub hash: String,
}

fn parse_field<T: std::str::FromStr>(
    section: &KvSection,
    key: &str,
) -> Result<Option<T>, Failure> {
    match section.get(key) {
        None => Ok(None),
        Some(raw) => raw
            .parse()
            .map(Some)
            .map_err(|_| usage(format!("manifest: cannot parse {key} = {raw}"))),
    }
}

fn parse_seeds(section: &KvSection) -> Result<Vec<u64>, Failure> {
    match section.get("seeds") {
        None => Ok(Vec::new()),
        Some(raw) => raw
            .split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| usage(format!("manifest: bad seed '{s}'")))
            })
            .collect(),
    }
}

fn spec_from_section(section: &KvSection) -> Result<RunSpec, Failure> {
    let require = |key: &str| {
        section
            .get(key)
            .map(str::to_string)
            .ok_or_else(|| usage(format!("manifest: [run] section missing '{key}'")))
    };
    Ok(RunSpec {
        task: require("task")?,
        model: require("model")?,
        ha: parse_field(section, "Ha")?,
        hc: parse_field(section, "Hc")?,
        bits: parse_field(section, "bits")?,
        train_len: parse_field(section, "L")?,
        steps: parse_field(section, "steps")?,
        hidden: parse_field(section, "hidden")?,
        batch: parse_field(section, "batch")?,
        seeds: parse_seeds(section)?,
    })
}

pub fn parse_manifest(text: &str) -> Result<Manifest, Failure> {
    let doc = KvDoc::parse(text).map_err(|e| usage(format!("manifest: {e}")))?;
    let head = doc
        .section("manifest")
        .ok_or_else(|| usage("manifest: missing [manifest] section"))?;
    let profile_name = head.get("profile").unwrap_or("smoke");
    let profile = profile(profile_name)?;
    let out = head.get("out").map(PathBuf::from);
    let checkpoints = match head.get("checkpoints") {
        None => false,
        Some(raw) => raw
            .parse()
            .map_err(|_| usage(format!("manifest: bad checkpoints flag '{raw}'")))?,
    };
    let specs: Vec<RunSpec> = doc
        .sections_named("run")
        .into_iter()
        .map(spec_from_section)
        .collect::<Result<_, _>>()?;
    if specs.is_empty() {
        return Err(usage("manifest: no [run] sections"));
    }
    Ok(Manifest {
        profile,
        out,
        checkpoints,
        specs,
        hash: hex_digest(text),
    })
}

/// Manifest equivalent of a flag-specified run: canonical text, same hash
/// discipline.
pub fn inline_manifest(spec: RunSpec, profile_name: &str) -> Result<Manifest, Failure> {
    let prof = profile(profile_name)?;
    let mut doc = KvDoc::new();
    let head = doc.add_section("manifest");
    head.push("profile", prof.name);
    let run = doc.add_section("run");
    run.push("task", &spec.task);
    run.push("model", &spec.model);
    let mut opt = |key: &str, v: Option<usize>| {
        if let Some(v) = v {
            run.push(key, v);
        }
    };
    opt("Ha", spec.ha);
    opt("Hc", spec.hc);
    opt("bits", spec.bits);
    opt("L", spec.train_len);
    opt("steps", spec.steps);
    opt("hidden", spec.hidden);
    opt("batch", spec.batch);
    if !spec.seeds.is_empty() {
        let seeds = spec
            .seeds
            .iter()
            .map(u64::to_string)
            .collect::<Vec<_>>()
            .join(",");
        run.push("seeds", seeds);
    }
    let text = doc.render();
    Ok(Manifest {
        profile: prof,
        out: None,
        checkpoints: false,
        specs: vec![spec],
        hash: hex_digest(&text),
    })
}

/// All configs a manifest launches, validated before anything runs.
pub fn expand(manifest: &Manifest) -> Result<Vec<RunConfig>, Failure> {
    let mut configs = Vec::new();
    for spec in &manifest.specs {
        configs.extend(resolve(spec, manifest.profile)?);
    }
    let mut ids: Vec<String> = configs.iter().map(RunConfig::run_id).collect();
    ids.sort();
    ids.dedup();
    if ids.len() != configs.len() {
        return Err(usage("manifest: duplicate run (same config and seed)"));
    }
    Ok(configs)
}

fn hex_digest(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
