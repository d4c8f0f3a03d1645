use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use anyhow::{anyhow, bail, Context};
use log::info;
use mrf_core::dictionary::{load_dictionary, save_dictionary, simulate_dictionary};
use mrf_core::maps::save_qmaps;
use mrf_core::matcher::{cost_report, match_image};
use mrf_core::mrfnet::{load_model, make_training_set, save_model, train};
use mrf_core::recon::{
    add_kspace_noise, back_project, forward_acquire, make_phantom, map_error, reconstruct_maps,
    sampling_masks, synthesize_image, Estimator, MapError,
};
use mrf_core::spline::{filter_report, label_contiguity, segment_report};
use mrf_core::subspace::{compute_subspace, SubspaceOptions};
use mrf_core::{CompressedDictionary, CostReport, Dictionary, Engine, MlpModel};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{
    self, resolve, AnalyzeConfig, BenchConfig, EngineChoice, ReconstructConfig, SimDictConfig,
    TrainCommandConfig,
};
use crate::manifest::{hex, Recorder};

/// Marks a failure caused by the configuration rather than the run.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn cfg<T, E: Into<anyhow::Error>>(r: Result<T, E>) -> anyhow::Result<T> {
    r.map_err(|e| ConfigError(format!("{:#}", e.into())).into())
}

/// Writes a JSON report to stdout; a closed pipe is not an error.
fn emit(json: &[u8]) -> anyhow::Result<()> {
    let mut out = std::io::stdout().lock();
    match out.write_all(json).and_then(|()| out.write_all(b"\n")) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn base_dir(config: &Path) -> &Path {
    config.parent().unwrap_or(Path::new("."))
}

fn load_dict(rec: &mut Recorder, path: &Path) -> anyhow::Result<Dictionary> {
    rec.input(path)?;
    load_dictionary(path).with_context(|| format!("cannot load dictionary {}", path.display()))
}

pub fn sim_dict(config: &Path, out: &Path) -> anyhow::Result<()> {
    let (c, bytes): (SimDictConfig, _) = cfg(config::load(config))?;
    let base = base_dir(config);
    let seq = cfg(c.sequence.build(base))?;
    let grid = cfg(c.grid.build())?;
    let mut rec = Recorder::new("sim-dict", &bytes, None, out);
    if let Some(f) = &c.sequence.flip_angles_file {
        rec.input(&resolve(base, f))?;
    }
    info!("simulating {} atoms of {} frames", grid.len(), seq.len());
    let dict = simulate_dictionary(&grid, &seq)?;
    save_dictionary(&dict, rec.output("dictionary.mrfd"))?;
    rec.finish()?;
    Ok(())
}

pub fn train_cmd(config: &Path, out: &Path) -> anyhow::Result<()> {
    let (c, bytes): (TrainCommandConfig, _) = cfg(config::load(config))?;
    let mut tc = c.training.clone();
    tc.rng_seed = c.seed;
    cfg(tc.validate().context("training"))?;
    if c.layout.first() != Some(&c.rank) || c.layout.len() < 2 {
        return Err(ConfigError(format!(
            "layout: must start with the rank {} and hold at least two widths",
            c.rank
        ))
        .into());
    }
    let mut rec = Recorder::new("train", &bytes, Some(c.seed), out);
    let dict = load_dict(&mut rec, &resolve(base_dir(config), &c.dictionary))?;
    info!(
        "computing rank-{} subspace of {} atoms",
        c.rank,
        dict.n_atoms()
    );
    let sub = compute_subspace(&dict, c.rank, &SubspaceOptions::default())?;
    let layout: Vec<usize> = std::iter::once(dict.frames())
        .chain(c.layout.iter().copied())
        .collect();
    let init = MlpModel::init(sub.clone(), &layout, c.seed)?;
    let set = make_training_set(&dict, &sub, &tc)?;
    info!("training {:?} on {} pairs", layout, set.len());
    let (model, history) = train(&init, &set, &tc)?;

    save_model(&model, Some(&tc), rec.output("model.mrfn"))?;
    let mut csv = String::from("epoch,loss\n");
    history
        .iter()
        .enumerate()
        .for_each(|(e, l)| csv.push_str(&format!("{e},{l}\n")));
    rec.write_output("loss.csv", csv.as_bytes())?;
    sub.write_csv(rec.output("subspace.csv"))?;
    rec.finish()?;
    Ok(())
}

#[derive(Serialize)]
struct RegionGap {
    name: String,
    t1_rel_gap: Option<f64>,
    t2_rel_gap: Option<f64>,
}

#[derive(Serialize)]
struct ReconstructMetrics {
    n: usize,
    m: usize,
    engines: BTreeMap<&'static str, MapError>,
    /// `|DM - NET| / DM` of the region medians when both engines ran.
    agreement: Option<Vec<RegionGap>>,
}

pub fn reconstruct(
    config: &Path,
    out: &Path,
    engine: Option<EngineChoice>,
    m: Option<usize>,
) -> anyhow::Result<()> {
    let (mut c, bytes): (ReconstructConfig, _) = cfg(config::load(config))?;
    c.engine = engine.unwrap_or(c.engine);
    c.m = m.or(c.m);
    cfg(c.check())?;
    let base = base_dir(config);
    let seq = cfg(c.sequence.build(base))?;
    let mut rec = Recorder::new("reconstruct", &bytes, Some(c.seed), out);

    let dict = c
        .dictionary
        .as_ref()
        .map(|p| load_dict(&mut rec, &resolve(base, p)))
        .transpose()?;
    if let Some(d) = &dict {
        if d.seq_digest() != &seq.digest() {
            return Err(ConfigError(
                "dictionary: simulated with a different sequence than `sequence`".into(),
            )
            .into());
        }
    }
    let grid = match &dict {
        Some(d) => *d.grid(),
        None => cfg(c.grid.build())?,
    };
    let model = match &c.checkpoint {
        Some(p) if c.engine != EngineChoice::Dm => {
            let p = resolve(base, p);
            rec.input(&p)?;
            Some(
                load_model(&p)
                    .with_context(|| format!("cannot load checkpoint {}", p.display()))?
                    .0,
            )
        }
        _ => None,
    };

    let phantom = cfg(make_phantom(&c.phantom, &grid).context("phantom"))?;
    let n = phantom.n_voxels();
    let m = c.m.unwrap_or(n / 16);
    let masks =
        cfg(sampling_masks(phantom.height, phantom.width, seq.len(), m, c.seed).context("m"))?;
    info!(
        "acquiring {m} of {n} k-space samples per frame over {} frames",
        seq.len()
    );
    let image = synthesize_image(&phantom, &seq)?;
    let mut kspace = forward_acquire(&image, &masks)?;
    if let Some(sigma) = c.noise_sigma {
        add_kspace_noise(&mut kspace, sigma, c.seed);
    }
    let back = back_project(&kspace)?;

    let mut engines = BTreeMap::new();
    if let Some(d) = &dict {
        if c.engine != EngineChoice::Net {
            info!("matching {n} voxels against {} atoms", d.n_atoms());
            let sub = compute_subspace(d, c.rank, &SubspaceOptions::default())?;
            let cd = CompressedDictionary::new(d, &sub)?;
            let maps = reconstruct_maps(
                &back,
                &Estimator::Dm {
                    dict: &cd,
                    subspace: &sub,
                },
                c.degenerate_rel,
            )?;
            save_qmaps(&maps, rec.output("dm.mrfq"))?;
            maps.write_csv(rec.output("dm_maps.csv"))?;
            engines.insert(Engine::Dm.tag(), map_error(&maps, &phantom)?);
        }
    }
    if let Some(model) = &model {
        info!("running the network on {n} voxels");
        let est = Estimator::Net {
            model,
            grid: &grid,
            seq: &seq,
        };
        let maps = reconstruct_maps(&back, &est, c.degenerate_rel)?;
        save_qmaps(&maps, rec.output("net.mrfq"))?;
        maps.write_csv(rec.output("net_maps.csv"))?;
        engines.insert(Engine::Net.tag(), map_error(&maps, &phantom)?);
    }

    let agreement = match (engines.get("DM"), engines.get("NET")) {
        (Some(a), Some(b)) => Some(
            a.regions
                .iter()
                .zip(&b.regions)
                .map(|(x, y)| {
                    let gap = |p: Option<f64>, q: Option<f64>| Some((p? - q?).abs() / p?);
                    RegionGap {
                        name: x.name.clone(),
                        t1_rel_gap: gap(x.t1_median_ms, y.t1_median_ms),
                        t2_rel_gap: gap(x.t2_median_ms, y.t2_median_ms),
                    }
                })
                .collect(),
        ),
        _ => None,
    };
    let metrics = serde_json::to_vec_pretty(&ReconstructMetrics {
        n,
        m,
        engines,
        agreement,
    })?;
    rec.write_output("metrics.json", &metrics)?;
    emit(&metrics)?;
    rec.finish()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Report {
    Segments,
    Filters,
}

pub fn analyze(report: Report, config: &Path, out: &Path) -> anyhow::Result<()> {
    let (c, bytes): (AnalyzeConfig, _) = cfg(config::load(config))?;
    if c.k == 0 {
        return Err(ConfigError("k: must be at least 1".into()).into());
    }
    let base = base_dir(config);
    let mut rec = Recorder::new(
        match report {
            Report::Segments => "analyze-segments",
            Report::Filters => "analyze-filters",
        },
        &bytes,
        Some(c.seed),
        out,
    );
    let ckpt = resolve(base, &c.checkpoint);
    rec.input(&ckpt)?;
    let (model, meta) =
        load_model(&ckpt).with_context(|| format!("cannot load checkpoint {}", ckpt.display()))?;
    if meta.train_config.is_none() {
        bail!("checkpoint {} carries no training record", ckpt.display());
    }
    let dict = load_dict(&mut rec, &resolve(base, &c.dictionary))?;
    match report {
        Report::Segments => {
            let r = segment_report(&model, &dict, c.k, c.seed, c.max_iter)?;
            info!(
                "{} probes, {} activation patterns, label contiguity {:.4}",
                r.map.labels.len(),
                r.distinct_patterns,
                label_contiguity(dict.grid(), &r.map.labels)
            );
            r.write_csv(rec.output("segments.csv"))?;
        }
        Report::Filters => {
            let r = filter_report(&model, &dict, c.region.into())?;
            info!(
                "filters at {:?}; T1 filter holds {:.3} of its energy in the first 200 frames",
                r.center_params,
                r.early_energy_fraction(0, 200)
            );
            rec.write_output("filters.csv", r.filter_csv().as_bytes())?;
            rec.write_output("fingerprints.csv", r.fingerprints_csv(&dict).as_bytes())?;
        }
    }
    rec.finish()?;
    Ok(())
}

#[derive(Serialize)]
struct BenchSizes {
    frames: usize,
    rank: usize,
    atoms: usize,
    layout: Vec<usize>,
}

#[derive(Serialize)]
struct BenchTiming {
    voxels: usize,
    dm_seconds: f64,
    net_seconds: f64,
    speedup: f64,
}

#[derive(Serialize)]
struct BenchReport {
    sizes: BenchSizes,
    cost: CostReport,
    timing: BenchTiming,
}

pub fn bench(config: &Path, out: &Path) -> anyhow::Result<()> {
    let (c, bytes): (BenchConfig, _) = cfg(config::load(config))?;
    let cost = cfg(cost_report(c.frames, c.rank, c.atoms, &c.layout).context("sizes"))?;
    if c.voxels == 0 {
        return Err(ConfigError("voxels: must be positive".into()).into());
    }
    let mut rec = Recorder::new("bench", &bytes, Some(c.seed), out);

    let sub = mrf_bench::small_subspace(c.frames, c.rank)?;
    let cd = mrf_bench::random_compressed(c.atoms, c.rank, c.seed)?;
    let layout: Vec<usize> = std::iter::once(c.frames)
        .chain(c.layout.iter().copied())
        .collect();
    let model = MlpModel::init(sub.clone(), &layout, c.seed)?;
    let image = mrf_bench::random_image(1, c.voxels, c.frames, c.seed.wrapping_add(1))?;

    let t = Instant::now();
    let net: Vec<_> = (0..c.voxels)
        .into_par_iter()
        .map(|v| model.predict(image.voxel(v)))
        .collect();
    let net_seconds = t.elapsed().as_secs_f64();
    let t = Instant::now();
    let dm = match_image(&cd, &sub, &image, 0.0)?;
    let dm_seconds = t.elapsed().as_secs_f64();
    let failed =
        net.iter().filter(|r| r.is_err()).count() + dm.flags.iter().filter(|&&f| f).count();
    if failed > 0 {
        return Err(anyhow!("{failed} synthetic voxels could not be estimated"));
    }

    let report = BenchReport {
        sizes: BenchSizes {
            frames: c.frames,
            rank: c.rank,
            atoms: c.atoms,
            layout: c.layout.clone(),
        },
        cost,
        timing: BenchTiming {
            voxels: c.voxels,
            dm_seconds,
            net_seconds,
            speedup: dm_seconds / net_seconds,
        },
    };
    let json = serde_json::to_vec_pretty(&report)?;
    rec.write_output("bench.json", &json)?;
    emit(&json)?;
    info!("model layer-1 digest {}", hex(&model.layer1_digest()));
    rec.finish()?;
    Ok(())
}
