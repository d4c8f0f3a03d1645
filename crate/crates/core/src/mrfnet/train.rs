use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::{Gradients, MlpModel};
use crate::dictionary::{Dictionary, ParamGrid};
use crate::error::{Error, Result};
use crate::matcher::{nns_match, CompressedDictionary};
use crate::subspace::Subspace;

/// Where training noise is injected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseDomain {
    /// Real white noise added to the compressed atom.
    Compressed,
    /// Real white noise added to the length-L atom before projection.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub step_size: f64,
    /// Step-size multiplier applied after every epoch.
    pub decay: f64,
    /// `None` disables noise.
    pub snr_db_range: Option<(f64, f64)>,
    pub augmentation_factor: usize,
    pub rng_seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub noise_domain: NoiseDomain,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 50,
            epochs: 30,
            step_size: 1e-2,
            decay: 0.8,
            snr_db_range: Some((40.0, 60.0)),
            augmentation_factor: 100,
            rng_seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            noise_domain: NoiseDomain::Compressed,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.augmentation_factor == 0 {
            return bad("augmentation_factor must be at least 1");
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return bad("decay must lie in (0, 1]");
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return bad("step_size must be positive");
        }
        if let Some((lo, hi)) = self.snr_db_range {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return bad("snr_db_range must be finite and ordered");
            }
        }
        if !(0.0..1.0).contains(&self.adam_beta1)
            || !(0.0..1.0).contains(&self.adam_beta2)
            || !(self.adam_eps > 0.0)
        {
            return bad("Adam parameters out of range");
        }
        Ok(())
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Counter-based seed for the noise of one `(atom, repetition)` pair.
pub fn pair_seed(seed: u64, atom: usize, rep: usize) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ atom as u64) ^ rep as u64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub input: Vec<f64>,
    pub label: (f64, f64),
}

/// Noisy compressed atoms with labels re-derived by nearest-neighbour
/// search over the clean compressed dictionary. Inputs are regenerated on
/// demand from `(atom, repetition, seed)`; labels are computed once.
pub struct TrainingSet<'a> {
    dict: &'a Dictionary,
    subspace: &'a Subspace,
    clean: Vec<f64>,
    labels: Vec<u32>,
    grid: ParamGrid,
    augmentation: usize,
    snr_db_range: Option<(f64, f64)>,
    domain: NoiseDomain,
    seed: u64,
}

/// Builds the relabelled training set. Pair `i` comes from atom
/// `i / augmentation_factor`.
pub fn make_training_set<'a>(
    dict: &'a Dictionary,
    subspace: &'a Subspace,
    cfg: &TrainConfig,
) -> Result<TrainingSet<'a>> {
    cfg.validate()?;
    let s = subspace.dim();
    let clean: Vec<f64> = subspace.project_atoms(dict)?.iter().map(|c| c.re).collect();
    let cd = CompressedDictionary::from_compressed(
        clean.iter().map(|&v| Complex64::new(v, 0.0)).collect(),
        s,
        *dict.grid(),
    )?;
    let mut set = TrainingSet {
        dict,
        subspace,
        clean,
        labels: Vec::new(),
        grid: *dict.grid(),
        augmentation: cfg.augmentation_factor,
        snr_db_range: cfg.snr_db_range,
        domain: cfg.noise_domain,
        seed: cfg.rng_seed,
    };
    let labels: Result<Vec<u32>> = (0..set.len())
        .into_par_iter()
        .map_init(
            || vec![0.0; s],
            |buf, i| {
                set.input_into(i, buf);
                let x: Vec<Complex64> = buf.iter().map(|&v| Complex64::new(v, 0.0)).collect();
                Ok(nns_match(&cd, &x)?.atom_index as u32)
            },
        )
        .collect();
    set.labels = labels?;
    Ok(set)
}

impl TrainingSet<'_> {
    pub fn len(&self) -> usize {
        self.grid.len() * self.augmentation
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.subspace.dim()
    }

    /// Grid index of the generating atom.
    pub fn source_index(&self, i: usize) -> usize {
        i / self.augmentation
    }

    pub fn label_index(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn label(&self, i: usize) -> (f64, f64) {
        self.grid.params_of(self.label_index(i))
    }

    fn input_into(&self, i: usize, out: &mut [f64]) {
        let s = self.dim();
        let (atom, rep) = (i / self.augmentation, i % self.augmentation);
        let clean = &self.clean[atom * s..(atom + 1) * s];
        out.copy_from_slice(clean);
        let Some((lo, hi)) = self.snr_db_range else {
            return;
        };
        let mut rng = ChaCha8Rng::seed_from_u64(pair_seed(self.seed, atom, rep));
        let snr_db = if hi > lo {
            rng.random_range(lo..hi)
        } else {
            lo
        };
        let snr = 10f64.powf(snr_db / 10.0);
        match self.domain {
            NoiseDomain::Compressed => {
                let sigma = (clean.iter().map(|v| v * v).sum::<f64>() / (s as f64 * snr)).sqrt();
                for o in out.iter_mut() {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    *o += sigma * e;
                }
            }
            NoiseDomain::Full => {
                let atom_full = self.dict.atom(atom);
                let energy: f64 = atom_full
                    .iter()
                    .map(|c| (c.re as f64).powi(2) + (c.im as f64).powi(2))
                    .sum();
                let sigma = (energy / (atom_full.len() as f64 * snr)).sqrt();
                let noise: Vec<Complex64> = (0..atom_full.len())
                    .map(|_| {
                        let e: f64 = StandardNormal.sample(&mut rng);
                        Complex64::new(sigma * e, 0.0)
                    })
                    .collect();
                let projected = self
                    .subspace
                    .project_real(&noise)
                    .expect("noise has signal length");
                out.iter_mut().zip(projected).for_each(|(o, n)| *o += n);
            }
        }
    }

    pub fn pair(&self, i: usize) -> TrainingPair {
        let mut input = vec![0.0; self.dim()];
        self.input_into(i, &mut input);
        TrainingPair {
            input,
            label: self.label(i),
        }
    }

    /// Fraction of pairs whose label differs from the generating atom.
    pub fn relabel_fraction(&self) -> f64 {
        let moved = (0..self.len())
            .filter(|&i| self.label_index(i) != self.source_index(i))
            .count();
        moved as f64 / self.len() as f64
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

/// Mini-batch Adam on the mean-squared error of the scaled targets.
/// Returns the trained model and the mean loss of each epoch.
///
/// Before the first epoch, any output unit whose pre-activation is
/// non-positive on every clean atom has its weight row negated, so the
/// final ReLU does not start dead. The He-uniform distribution is
/// symmetric, so this keeps the initial distribution.
pub fn train(
    model: &MlpModel,
    set: &TrainingSet<'_>,
    cfg: &TrainConfig,
) -> Result<(MlpModel, Vec<f64>)> {
    cfg.validate()?;
    if model.subspace().dim() != set.dim() || model.n_outputs() != 2 {
        return Err(Error::InvalidArgument(
            "model must take the training subspace and predict (T1, T2)".into(),
        ));
    }
    let mut model = model.clone();
    revive_dead_outputs(&mut model, set);
    let scale = model.target_scale().to_vec();
    let n = set.len();
    let params = model.parameters().len();
    let mut adam = Adam {
        m: vec![0.0; params],
        v: vec![0.0; params],
        t: 0,
    };
    let mut order: Vec<u32> = (0..n as u32).collect();
    let mut grads = Gradients::zeros_like(&model);
    let mut input = vec![0.0; set.dim()];
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = cfg.step_size * cfg.decay.powi(epoch as i32);
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(
            cfg.rng_seed ^ 0x5eed_0000_0000_0000 ^ epoch as u64,
        ));
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            grads.clear();
            let mut batch_loss = 0.0;
            for &i in batch {
                set.input_into(i as usize, &mut input);
                let (t1, t2) = set.label(i as usize);
                let target = [t1 * scale[0], t2 * scale[1]];
                batch_loss += model.accumulate_gradients(&input, &target, &mut grads);
            }
            if !batch_loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            epoch_loss += batch_loss;
            let inv = 1.0 / batch.len() as f64;
            adam_step(&mut model, &mut adam, &grads, inv, lr, cfg);
        }
        let mean = epoch_loss / n as f64;
        log::info!("epoch {epoch}: loss {mean:.6e}, step {lr:.3e}");
        history.push(mean);
    }
    Ok((model, history))
}

fn adam_step(
    model: &mut MlpModel,
    adam: &mut Adam,
    grads: &Gradients,
    inv: f64,
    lr: f64,
    cfg: &TrainConfig,
) {
    adam.t += 1;
    let c1 = 1.0 - cfg.adam_beta1.powi(adam.t);
    let c2 = 1.0 - cfg.adam_beta2.powi(adam.t);
    let mut k = 0;
    for (layer, (gw, gb)) in model
        .layers_mut()
        .iter_mut()
        .zip(grads.weights.iter().zip(&grads.biases))
    {
        for (p, g) in layer
            .weights
            .iter_mut()
            .chain(layer.biases.iter_mut())
            .zip(gw.iter().chain(gb))
        {
            let g = g * inv;
            let m = &mut adam.m[k];
            let v = &mut adam.v[k];
            *m = cfg.adam_beta1 * *m + (1.0 - cfg.adam_beta1) * g;
            *v = cfg.adam_beta2 * *v + (1.0 - cfg.adam_beta2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + cfg.adam_eps);
            k += 1;
        }
    }
}

fn revive_dead_outputs(model: &mut MlpModel, set: &TrainingSet<'_>) {
    let s = set.dim();
    let atoms = set.clean.len() / s;
    let p = model.n_outputs();
    let mut alive = vec![false; p];
    for j in 0..atoms {
        let z = model
            .trace(&set.clean[j * s..(j + 1) * s])
            .pre
            .pop()
            .unwrap();
        z.iter()
            .zip(alive.iter_mut())
            .for_each(|(z, a)| *a |= *z > 0.0);
    }
    let last = model.layers_mut().last_mut().unwrap();
    for (r, a) in alive.iter().enumerate() {
        if !a {
            log::debug!("output unit {r} is dead at initialization, flipping its weights");
            last.weights[r * last.inputs..(r + 1) * last.inputs]
                .iter_mut()
                .for_each(|w| *w = -*w);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dictionary::{build_grid, simulate_dictionary, RangeSpec};
    use crate::epg::SequenceParams;
    use crate::subspace::{compute_subspace, SubspaceOptions};

    fn setup() -> (Dictionary, Subspace) {
        let g = build_grid(
            RangeSpec::new(300.0, 300.0, 3000.0),
            RangeSpec::new(40.0, 40.0, 400.0),
        )
        .unwrap();
        let dict = simulate_dictionary(&g, &SequenceParams::fisp(200)).unwrap();
        let sub = compute_subspace(&dict, 6, &SubspaceOptions::default()).unwrap();
        (dict, sub)
    }

    #[test]
    fn noiseless_labels_are_the_generating_atoms() {
        let (dict, sub) = setup();
        let cfg = TrainConfig {
            snr_db_range: None,
            augmentation_factor: 1,
            ..TrainConfig::default()
        };
        let set = make_training_set(&dict, &sub, &cfg).unwrap();
        assert_eq!(set.len(), dict.n_atoms());
        for i in 0..set.len() {
            assert_eq!(set.label(i), dict.grid().params_of(i));
        }
        assert_eq!(set.relabel_fraction(), 0.0);
    }

    #[test]
    fn low_snr_relabels_some_pairs() {
        let (dict, sub) = setup();
        let cfg = TrainConfig {
            snr_db_range: Some((40.0, 40.0)),
            augmentation_factor: 100,
            ..TrainConfig::default()
        };
        let set = make_training_set(&dict, &sub, &cfg).unwrap();
        assert_eq!(set.len(), 100 * dict.n_atoms());
        assert!(set.relabel_fraction() > 0.0);
    }

    #[test]
    fn pairs_are_reproducible_and_noise_matches_snr() {
        let (dict, sub) = setup();
        let cfg = TrainConfig {
            snr_db_range: Some((50.0, 50.0)),
            augmentation_factor: 400,
            rng_seed: 17,
            ..TrainConfig::default()
        };
        let a = make_training_set(&dict, &sub, &cfg).unwrap();
        let b = make_training_set(&dict, &sub, &cfg).unwrap();
        assert_eq!(a.pair(1234), b.pair(1234));
        assert_eq!(a.labels, b.labels);
        let s = a.dim();
        let (mut noise, mut signal) = (0.0, 0.0);
        for i in 0..400 {
            let p = a.pair(i);
            let clean = &a.clean[..s];
            noise += p
                .input
                .iter()
                .zip(clean)
                .map(|(x, c)| (x - c).powi(2))
                .sum::<f64>();
            signal += clean.iter().map(|c| c * c).sum::<f64>();
        }
        let snr_db = 10.0 * (signal / noise).log10();
        assert!((snr_db - 50.0).abs() < 0.5, "{snr_db}");
    }

    #[test]
    fn full_domain_noise_is_supported() {
        let (dict, sub) = setup();
        let cfg = TrainConfig {
            augmentation_factor: 2,
            noise_domain: NoiseDomain::Full,
            ..TrainConfig::default()
        };
        let set = make_training_set(&dict, &sub, &cfg).unwrap();
        let p = set.pair(3);
        assert!(p.input.iter().zip(&set.clean[..6]).any(|(a, b)| a != b));
    }

    #[test]
    fn config_validation() {
        let mut cfg = TrainConfig::default();
        cfg.validate().unwrap();
        cfg.decay = 0.0;
        assert!(cfg.validate().is_err());
        cfg.decay = 0.8;
        cfg.snr_db_range = Some((60.0, 40.0));
        assert!(cfg.validate().is_err());
        cfg.snr_db_range = None;
        cfg.batch_size = 0;
        assert!(cfg.validate().is_err());
        let parsed: TrainConfig =
            serde_json::from_str(r#"{"epochs": 3, "snr_db_range": [30, 35]}"#).unwrap();
        assert_eq!(parsed.epochs, 3);
        assert_eq!(parsed.snr_db_range, Some((30.0, 35.0)));
        assert!(serde_json::from_str::<TrainConfig>(r#"{"epoch": 3}"#).is_err());
    }

    #[test]
    fn memorizes_a_single_pair() {
        let (dict, sub) = setup();
        let g = build_grid(
            RangeSpec::new(900.0, 1.0, 900.0),
            RangeSpec::new(80.0, 1.0, 80.0),
        )
        .unwrap();
        let one = simulate_dictionary(&g, &SequenceParams::fisp(200)).unwrap();
        let cfg = TrainConfig {
            snr_db_range: None,
            augmentation_factor: 1,
            batch_size: 1,
            epochs: 300,
            decay: 1.0,
            step_size: 1e-2,
            ..TrainConfig::default()
        };
        let set = make_training_set(&one, &sub, &cfg).unwrap();
        let model = MlpModel::init(sub.clone(), &[200, 6, 20, 10, 2], 1).unwrap();
        let (trained, history) = train(&model, &set, &cfg).unwrap();
        assert!(
            history.last().unwrap() < &1e-8,
            "{:?}",
            &history[history.len() - 3..]
        );
        let pred = trained.forward(&one.atom_f64(0)).unwrap();
        assert!(
            (pred[0] - 900.0).abs() < 0.1 && (pred[1] - 80.0).abs() < 0.1,
            "{pred:?}"
        );
        drop(dict);
    }

    #[test]
    fn training_freezes_layer_one_and_reduces_loss() {
        let (dict, sub) = setup();
        let cfg = TrainConfig {
            augmentation_factor: 10,
            epochs: 8,
            rng_seed: 3,
            ..TrainConfig::default()
        };
        let set = make_training_set(&dict, &sub, &cfg).unwrap();
        let model = MlpModel::init(sub.clone(), &[200, 6, 40, 12, 2], 5).unwrap();
        let (trained, history) = train(&model, &set, &cfg).unwrap();
        assert_eq!(trained.layer1_digest(), model.layer1_digest());
        assert_eq!(trained.subspace(), model.subspace());
        assert!(history.iter().all(|l| l.is_finite()));
        assert!(history.last().unwrap() < &history[0]);
        let (again, _) = train(&model, &set, &cfg).unwrap();
        assert_eq!(again, trained);
    }

    #[test]
    fn diverging_run_reports_epoch_and_batch() {
        let (dict, sub) = setup();
        let cfg = TrainConfig {
            augmentation_factor: 1,
            epochs: 2,
            step_size: 1e300,
            ..TrainConfig::default()
        };
        let set = make_training_set(&dict, &sub, &cfg).unwrap();
        let model = MlpModel::init(sub.clone(), &[200, 6, 40, 12, 2], 5).unwrap();
        match train(&model, &set, &cfg) {
            Err(Error::NonFiniteLoss { .. }) => {}
            other => panic!("expected divergence, got {:?}", other.map(|r| r.1)),
        }
    }
}
