//! Adam, checkpoints, the training loop, inference, evaluation and ablation.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{self, BitDepth, ImagePair};
use crate::error::{Error, Result};
use crate::loss::{self, MetricRecord};
use crate::model::{nearest_upsample, DeformMambaNet, ModelConfig};
use crate::nn::{seeded_rng, ParamStore};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Optimizer steps. A pass over `n` pairs takes `ceil(n / batch_size)`.
    pub iterations: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Save a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: usize,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            iterations: 200,
            batch_size: 2,
            seed: 0,
            checkpoint_every: 0,
            model: ModelConfig::tiny(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        self.model.validate()
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let cfg: TrainConfig = serde_json::from_slice(&bytes)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moments, one pair per parameter in store order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Number of updates applied so far.
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros = || params.iter().map(|(_, _, p)| Tensor::zeros(p.shape().to_vec())).collect();
        AdamState { m: zeros(), v: zeros(), t: 0 }
    }
}

/// One bias-corrected Adam update. Nothing is modified if any gradient is
/// non-finite; the error names the offending parameter.
pub fn adam_step(params: &mut ParamStore, grads: &[Tensor], state: &mut AdamState, lr: f64, hp: AdamHyper) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::Contract(format!("{} gradients for {} parameters", grads.len(), params.len())));
    }
    for ((_, name, p), g) in params.iter().zip(grads) {
        if g.shape() != p.shape() {
            return Err(Error::dim(format!("gradient of {name} has shape {:?}, expected {:?}", g.shape(), p.shape())));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite { op: format!("gradient of {name}") });
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - hp.beta1.powi(t);
    let bc2 = 1.0 - hp.beta2.powi(t);
    let ids: Vec<_> = params.ids().collect();
    for (i, id) in ids.into_iter().enumerate() {
        let (m, v, g) = (&mut state.m[i], &mut state.v[i], &grads[i]);
        let p = params.get_mut(id);
        for (((pj, mj), vj), &gj) in p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
            *mj = hp.beta1 * *mj + (1.0 - hp.beta1) * gj;
            *vj = hp.beta2 * *vj + (1.0 - hp.beta2) * gj * gj;
            let m_hat = *mj / bc1;
            let v_hat = *vj / bc2;
            *pj -= lr * m_hat / (v_hat.sqrt() + hp.eps);
        }
    }
    Ok(())
}

const MAGIC: &[u8; 8] = b"DMSRCKPT";
const FORMAT_VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub step: u64,
    pub params: ParamStore,
    pub adam: AdamState,
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn get_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|e| Error::Format(format!("truncated checkpoint: {e}")))?;
    Ok(u64::from_le_bytes(b))
}

fn get_bytes(r: &mut impl Read, what: &str) -> Result<Vec<u8>> {
    let n = get_u64(r)?;
    if n > 1 << 32 {
        return Err(Error::Format(format!("implausible {what} length {n}")));
    }
    let mut buf = vec![0u8; n as usize];
    r.read_exact(&mut buf).map_err(|e| Error::Format(format!("truncated {what}: {e}")))?;
    Ok(buf)
}

impl Checkpoint {
    /// Magic, version byte, config JSON, step, then per parameter its name,
    /// value and both Adam moments. Integers are little-endian `u64`.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(FORMAT_VERSION);
        let cfg = serde_json::to_vec(&self.config)?;
        put_u64(&mut out, cfg.len() as u64);
        out.extend_from_slice(&cfg);
        put_u64(&mut out, self.step);
        put_u64(&mut out, self.adam.t);
        put_u64(&mut out, self.params.len() as u64);
        for (i, (_, name, value)) in self.params.iter().enumerate() {
            put_u64(&mut out, name.len() as u64);
            out.extend_from_slice(name.as_bytes());
            for t in [value, &self.adam.m[i], &self.adam.v[i]] {
                out.extend_from_slice(&t.to_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 9];
        r.read_exact(&mut magic).map_err(|_| Error::Format("not a checkpoint (too short)".into()))?;
        if &magic[..8] != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        if magic[8] != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {}", magic[8])));
        }
        let config: TrainConfig = serde_json::from_slice(&get_bytes(&mut r, "config")?)?;
        let step = get_u64(&mut r)?;
        let t = get_u64(&mut r)?;
        let count = get_u64(&mut r)?;
        let mut params = ParamStore::new();
        let (mut m, mut v) = (Vec::new(), Vec::new());
        for _ in 0..count {
            let name = String::from_utf8(get_bytes(&mut r, "name")?)
                .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
            if params.find(&name).is_some() {
                return Err(Error::Format(format!("duplicate parameter `{name}`")));
            }
            params.add(name, Tensor::read_from(&mut r)?);
            m.push(Tensor::read_from(&mut r)?);
            v.push(Tensor::read_from(&mut r)?);
        }
        Ok(Checkpoint { config, step, params, adam: AdamState { m, v, t } })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(std::io::BufReader::new(f))
    }

    /// Rebuilds the network and checks the stored parameters fit it.
    pub fn network(&self) -> Result<(DeformMambaNet, ParamStore)> {
        let (net, mut fresh) = DeformMambaNet::new(&self.config.model, self.config.seed)?;
        fresh.load_from(&self.params)?;
        Ok((net, fresh))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub l1: f64,
    pub celoss: f64,
    pub total: f64,
}

/// Pair indices for optimizer step `step` (0-based). Each pass over the data
/// is a fresh permutation derived only from `(seed, epoch)`, so a resumed run
/// sees the same batches as an unbroken one.
pub fn batch_indices(seed: u64, step: u64, batch_size: usize, n: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(batch_size);
    let mut pos = step as usize * batch_size;
    let mut cached: Option<(usize, Vec<usize>)> = None;
    for _ in 0..batch_size {
        let (epoch, k) = (pos / n, pos % n);
        if cached.as_ref().map(|c| c.0) != Some(epoch) {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut seeded_rng(seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)));
            cached = Some((epoch, perm));
        }
        out.push(cached.as_ref().unwrap().1[k]);
        pos += 1;
    }
    out
}

pub struct Trainer {
    pub config: TrainConfig,
    pub net: DeformMambaNet,
    pub params: ParamStore,
    pub adam: AdamState,
    pub step: u64,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let (net, params) = DeformMambaNet::new(&config.model, config.seed)?;
        let adam = AdamState::new(&params);
        Ok(Trainer { config, net, params, adam, step: 0 })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let (net, params) = ckpt.network()?;
        if ckpt.adam.m.len() != params.len() || ckpt.adam.v.len() != params.len() {
            return Err(Error::Format("optimizer state does not match the parameters".into()));
        }
        Ok(Trainer { config: ckpt.config, net, params, adam: ckpt.adam, step: ckpt.step })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            step: self.step,
            params: self.params.clone(),
            adam: self.adam.clone(),
        }
    }

    /// Batch-mean losses and gradients at the current parameters.
    pub fn loss_and_gradients(&self, batch: &[&ImagePair]) -> Result<(LogRecord, Vec<Tensor>)> {
        let beta = self.config.model.effective_celoss_weight();
        let normalized = self.config.model.celoss_normalized;
        let mut grads: Vec<Tensor> = self.params.iter().map(|(_, _, p)| Tensor::zeros(p.shape().to_vec())).collect();
        let (mut l1, mut ce, mut total) = (0.0, 0.0, 0.0);
        let scale = 1.0 / batch.len() as f64;
        for pair in batch {
            let tape = if cfg!(debug_assertions) { Tape::with_finite_checks() } else { Tape::new() };
            let bound = self.params.bind(&tape);
            let sr = self.net.forward(&bound, tape.constant(pair.lr.clone()))?;
            let terms = loss::total_loss(sr, &pair.hr, beta, normalized)?;
            l1 += terms.l1.value().item() * scale;
            ce += terms.celoss.value().item() * scale;
            total += terms.total.value().item() * scale;
            let mut g = tape.backward(terms.total.scale(scale)?)?;
            for (acc, var) in grads.iter_mut().zip(bound.vars()) {
                if let Some(gv) = g.take(*var) {
                    acc.add_assign(&gv);
                }
            }
        }
        Ok((LogRecord { step: self.step + 1, l1, celoss: ce, total }, grads))
    }

    /// One optimizer step on the batch scheduled for the current step.
    pub fn train_step(&mut self, pairs: &[ImagePair]) -> Result<LogRecord> {
        if pairs.is_empty() {
            return Err(Error::Config("no training pairs".into()));
        }
        let idx = batch_indices(self.config.seed, self.step, self.config.batch_size, pairs.len());
        let batch: Vec<&ImagePair> = idx.iter().map(|&i| &pairs[i]).collect();
        let (record, grads) = self.loss_and_gradients(&batch)?;
        if !record.total.is_finite() {
            return Err(Error::NonFinite { op: format!("total loss at step {}", record.step) });
        }
        adam_step(&mut self.params, &grads, &mut self.adam, self.config.learning_rate, AdamHyper::default())?;
        self.step += 1;
        Ok(record)
    }

    /// Trains until `config.iterations` steps have been taken. Checkpoints go
    /// to `out_dir` (if given) every `checkpoint_every` steps and at the end.
    /// On divergence the pre-step state is saved as `last_good.ckpt`.
    pub fn run(&mut self, pairs: &[ImagePair], out_dir: Option<&Path>, mut on_log: impl FnMut(&LogRecord) -> Result<()>) -> Result<()> {
        for pair in pairs {
            self.net.check_input(pair.lr.shape())?;
        }
        while (self.step as usize) < self.config.iterations {
            let record = match self.train_step(pairs) {
                Ok(r) => r,
                Err(e @ Error::NonFinite { .. }) => {
                    if let Some(dir) = out_dir {
                        self.checkpoint().save(dir.join("last_good.ckpt"))?;
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            on_log(&record)?;
            let every = self.config.checkpoint_every;
            if let Some(dir) = out_dir {
                if every > 0 && self.step % every as u64 == 0 {
                    self.checkpoint().save(dir.join(format!("step{:06}.ckpt", self.step)))?;
                }
            }
        }
        if let Some(dir) = out_dir {
            self.checkpoint().save(dir.join("final.ckpt"))?;
        }
        Ok(())
    }
}

/// Trains from scratch and returns the loss log.
pub fn train(config: &TrainConfig, pairs: &[ImagePair], out_dir: Option<&Path>) -> Result<(Trainer, Vec<LogRecord>)> {
    let mut trainer = Trainer::new(config.clone())?;
    let mut log = Vec::new();
    trainer.run(pairs, out_dir, |r| {
        log.push(*r);
        Ok(())
    })?;
    Ok((trainer, log))
}

/// The parameter-free reference the network must beat: nearest-neighbour
/// upsampling of the input, which is also the global residual path.
pub fn identity_baseline(lr: &Tensor, scale: usize) -> Result<Tensor> {
    nearest_upsample(lr, scale)
}

pub fn infer(ckpt: &Checkpoint, lr: &Tensor) -> Result<Tensor> {
    let (net, params) = ckpt.network()?;
    net.infer(&params, lr)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub records: Vec<MetricRecord>,
    pub mean_psnr_db: f64,
    pub mean_ssim: f64,
}

impl EvalReport {
    pub fn from_records(records: Vec<MetricRecord>) -> Self {
        let n = records.len().max(1) as f64;
        let mean_psnr_db = records.iter().map(|r| r.psnr_db).sum::<f64>() / n;
        let mean_ssim = records.iter().map(|r| r.ssim).sum::<f64>() / n;
        EvalReport { records, mean_psnr_db, mean_ssim }
    }

    /// Aligned text table, PSNR then SSIM.
    pub fn table(&self) -> String {
        let width = self.records.iter().map(|r| r.id.len()).max().unwrap_or(0).max(5);
        let mut s = format!("{:<width$}  {:>9}  {:>7}\n", "image", "PSNR(dB)", "SSIM");
        for r in &self.records {
            s += &format!("{:<width$}  {:>9.4}  {:>7.4}\n", r.id, r.psnr_db, r.ssim);
        }
        s += &format!("{:<width$}  {:>9.4}  {:>7.4}\n", "mean", self.mean_psnr_db, self.mean_ssim);
        s
    }
}

pub fn score(id: &str, sr: &Tensor, hr: &Tensor) -> Result<MetricRecord> {
    Ok(MetricRecord {
        id: id.to_string(),
        psnr_db: loss::psnr_capped(sr, hr, 1.0)?,
        ssim: loss::ssim(sr, hr, 1.0)?,
    })
}

/// What `evaluate` compares against the ground truth.
#[derive(Debug, Clone, Copy)]
pub enum EvalSource<'a> {
    Model(&'a DeformMambaNet, &'a ParamStore),
    /// The ground truth itself, a sanity check of the metric pipeline.
    Bypass,
}

/// Scores every pair; with `error_maps` set, writes `<id>_error.png` there.
pub fn evaluate(source: EvalSource<'_>, pairs: &[ImagePair], error_maps: Option<&Path>) -> Result<EvalReport> {
    let mut records = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let sr = match source {
            EvalSource::Model(net, params) => net.infer(params, &pair.lr)?,
            EvalSource::Bypass => pair.hr.clone(),
        };
        records.push(score(&pair.id, &sr, &pair.hr)?);
        if let Some(dir) = error_maps {
            let stem = Path::new(&pair.id).file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            data::save_image(&loss::error_map(&sr, &pair.hr)?, dir.join(format!("{stem}_error.png")), BitDepth::Eight)?;
        }
    }
    Ok(EvalReport::from_records(records))
}

pub const ABLATION_LABELS: [&str; 4] = ["w/o Deform", "w/o MVC", "w/o CELoss", "Deform-Mamba"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub parameters: usize,
    pub psnr_db: f64,
    pub ssim: f64,
}

pub fn ablation_configs(base: &TrainConfig) -> Vec<(&'static str, TrainConfig)> {
    let with = |f: fn(&mut ModelConfig)| {
        let mut c = base.clone();
        f(&mut c.model);
        c
    };
    vec![
        (ABLATION_LABELS[0], with(|m| m.use_deform = false)),
        (ABLATION_LABELS[1], with(|m| m.use_mvc = false)),
        (ABLATION_LABELS[2], with(|m| m.use_celoss = false)),
        (ABLATION_LABELS[3], with(|m| {
            m.use_deform = true;
            m.use_mvc = true;
            m.use_celoss = true;
        })),
    ]
}

/// Trains the four ablation variants under one seed and scores each on
/// `eval_pairs`.
pub fn ablate(base: &TrainConfig, train_pairs: &[ImagePair], eval_pairs: &[ImagePair]) -> Result<Vec<AblationRow>> {
    ablation_configs(base)
        .into_iter()
        .map(|(label, cfg)| {
            let (trainer, _) = train(&cfg, train_pairs, None)?;
            let report = evaluate(EvalSource::Model(&trainer.net, &trainer.params), eval_pairs, None)?;
            Ok(AblationRow {
                label: label.to_string(),
                parameters: trainer.params.num_scalars(),
                psnr_db: report.mean_psnr_db,
                ssim: report.mean_ssim,
            })
        })
        .collect()
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = format!("{:<14}  {:>10}  {:>9}  {:>7}\n", "Method", "Params", "PSNR(dB)", "SSIM");
    for r in rows {
        s += &format!("{:<14}  {:>10}  {:>9.4}  {:>7.4}\n", r.label, r.parameters, r.psnr_db, r.ssim);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{degrade_kspace, synthetic_phantom};
    use proptest::prelude::*;

    fn one_param(value: Tensor) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", value);
        s
    }

    #[test]
    fn zero_gradient_leaves_params_and_decays_moments() {
        let mut p = one_param(Tensor::new([2], vec![1.0, -2.0]).unwrap());
        let mut st = AdamState::new(&p);
        st.m[0] = Tensor::new([2], vec![0.5, 0.5]).unwrap();
        st.v[0] = Tensor::new([2], vec![0.25, 0.25]).unwrap();
        let before = p.clone();
        adam_step(&mut p, &[Tensor::zeros([2])], &mut st, 1e-4, AdamHyper::default()).unwrap();
        assert_eq!(st.m[0].data(), &[0.45, 0.45]);
        assert!((st.v[0].data()[0] - 0.24975).abs() < 1e-15);
        // The stale moments still move the parameters; with zero moments they would not.
        let mut q = before.clone();
        let mut fresh = AdamState::new(&q);
        adam_step(&mut q, &[Tensor::zeros([2])], &mut fresh, 1e-4, AdamHyper::default()).unwrap();
        assert_eq!(q, before);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = one_param(Tensor::scalar(0.0));
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &[Tensor::scalar(1.0)], &mut st, 1e-4, AdamHyper::default()).unwrap();
        let expect = -1e-4 / (1.0 + 1e-8);
        assert!((p.get(p.find("w").unwrap()).item() - expect).abs() < 1e-18);
    }

    proptest! {
        #[test]
        fn constant_gradient_steps_approach_lr(g in prop_oneof![-5.0f64..-0.01, 0.01f64..5.0]) {
            let mut p = one_param(Tensor::scalar(0.0));
            let mut st = AdamState::new(&p);
            let id = p.find("w").unwrap();
            let mut last = 0.0;
            for _ in 0..500 {
                let before = p.get(id).item();
                adam_step(&mut p, &[Tensor::scalar(g)], &mut st, 1e-3, AdamHyper::default()).unwrap();
                last = p.get(id).item() - before;
            }
            prop_assert!((last + 1e-3 * g.signum()).abs() < 1e-9);
        }
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let mut p = one_param(Tensor::zeros([3]));
        let mut st = AdamState::new(&p);
        let err = adam_step(&mut p, &[Tensor::new([3], vec![0.0, f64::NAN, 1.0]).unwrap()], &mut st, 1e-4, AdamHyper::default())
            .unwrap_err();
        assert!(err.to_string().contains("gradient of w"), "{err}");
        assert_eq!(st.t, 0);
        assert_eq!(p.get(p.find("w").unwrap()), &Tensor::zeros([3]));
    }

    fn tiny_pairs(n: usize) -> Vec<ImagePair> {
        (0..n)
            .map(|i| {
                let hr = synthetic_phantom(32, 32, i as u64);
                ImagePair {
                    id: format!("p{i}"),
                    hr_path: format!("p{i}.png").into(),
                    lr: degrade_kspace(&hr, 2).unwrap(),
                    hr,
                    scale: 2,
                    crop: (0, 0, 32, 32),
                }
            })
            .collect()
    }

    fn short_config() -> TrainConfig {
        TrainConfig { iterations: 3, batch_size: 2, seed: 5, ..Default::default() }
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let (mut trainer, _) = train(&short_config(), &tiny_pairs(3), None).unwrap();
        trainer.step = 3;
        let ckpt = trainer.checkpoint();
        let bytes = ckpt.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes[..]).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back, ckpt);
        assert!(Checkpoint::from_bytes(&bytes[..20]).is_err());
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bad[..]), Err(Error::Format(_))));
    }

    #[test]
    fn same_seed_same_log_and_resume_matches() {
        let pairs = tiny_pairs(3);
        let cfg = TrainConfig { iterations: 4, ..short_config() };
        let (a, log_a) = train(&cfg, &pairs, None).unwrap();
        let (_, log_b) = train(&cfg, &pairs, None).unwrap();
        assert_eq!(log_a, log_b);

        let half = TrainConfig { iterations: 2, ..cfg.clone() };
        let (first, mut log_c) = train(&half, &pairs, None).unwrap();
        let mut ckpt = Checkpoint::from_bytes(&first.checkpoint().to_bytes().unwrap()[..]).unwrap();
        ckpt.config.iterations = 4;
        let mut resumed = Trainer::from_checkpoint(ckpt).unwrap();
        resumed.run(&pairs, None, |r| {
            log_c.push(*r);
            Ok(())
        })
        .unwrap();
        assert_eq!(log_c, log_a);
        assert_eq!(resumed.params, a.params);
    }

    #[test]
    fn zero_beta_logs_celoss_but_excludes_it() {
        let pairs = tiny_pairs(2);
        let mut cfg = short_config();
        cfg.iterations = 1;
        cfg.model.use_celoss = false;
        let (_, log) = train(&cfg, &pairs, None).unwrap();
        assert!(log[0].celoss > 0.0);
        assert_eq!(log[0].total, log[0].l1);
    }

    #[test]
    fn batches_cover_each_epoch_once() {
        let n = 5;
        let mut seen: Vec<usize> = (0..5).flat_map(|s| batch_indices(7, s, 2, n)).collect();
        seen.truncate(n);
        let mut sorted = seen.clone();
        sorted.sort();
        assert_eq!(sorted, vec![0, 1, 2, 3, 4]);
        assert_eq!(batch_indices(7, 3, 2, n), batch_indices(7, 3, 2, n));
    }

    #[test]
    fn divergence_saves_last_good_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let pairs = tiny_pairs(1);
        let mut trainer = Trainer::new(short_config()).unwrap();
        let id = trainer.params.find("head.bias").unwrap();
        trainer.params.get_mut(id).data_mut()[0] = f64::NAN;
        let err = trainer.run(&pairs, Some(dir.path()), |_| Ok(())).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }), "{err}");
        let saved = Checkpoint::load(dir.path().join("last_good.ckpt")).unwrap();
        assert_eq!(saved.step, 0);
    }

    #[test]
    fn eval_bypass_hits_the_caps_and_means_are_arithmetic() {
        let pairs = tiny_pairs(3);
        let report = evaluate(EvalSource::Bypass, &pairs, None).unwrap();
        assert!(report.records.iter().all(|r| r.psnr_db == loss::PSNR_CAP_DB && (r.ssim - 1.0).abs() < 1e-12));
        let recs = vec![
            MetricRecord { id: "a".into(), psnr_db: 30.0, ssim: 0.9 },
            MetricRecord { id: "b".into(), psnr_db: 33.0, ssim: 0.6 },
            MetricRecord { id: "c".into(), psnr_db: 27.0, ssim: 0.3 },
        ];
        let r = EvalReport::from_records(recs);
        assert_eq!(r.mean_psnr_db, 30.0);
        assert!((r.mean_ssim - 0.6).abs() < 1e-15);
        let header = r.table().lines().next().unwrap().to_string();
        assert!(header.find("PSNR").unwrap() < header.find("SSIM").unwrap());
    }

    #[test]
    fn ablation_rows_follow_the_table_order() {
        let base = TrainConfig::default();
        let cfgs = ablation_configs(&base);
        let labels: Vec<_> = cfgs.iter().map(|(l, _)| *l).collect();
        assert_eq!(labels, ABLATION_LABELS);
        assert!(!cfgs[0].1.model.use_deform && !cfgs[1].1.model.use_mvc);
        assert_eq!(cfgs[2].1.model.effective_celoss_weight(), 0.0);
        assert_eq!(cfgs[3].1.model, base.model);
    }

    #[test]
    fn config_json_defaults() {
        let cfg: TrainConfig = serde_json::from_str(r#"{"seed": 3, "model": {"scale": 4}}"#).unwrap();
        assert_eq!(cfg.learning_rate, 1e-4);
        assert_eq!(cfg.batch_size, 2);
        assert_eq!(cfg.model.scale, 4);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"lr": 3}"#).is_err());
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
    }
}
