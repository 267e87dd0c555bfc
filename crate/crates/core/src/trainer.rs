//! Adversarial training loop, optimizers and checkpoint files.

use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{NormalizationStats, WindowSet};
use crate::error::{Error, Result};
use crate::layers::Parameters;
use crate::model::{
    interpolate, kl_loss, regularizer_grads, reparameterize_backward, var_penalty, Critic,
    CriticParams, Generator, GeneratorParams, ModelConfig,
};
use crate::qsim::NoiseSpec;
use crate::rng::{self, standard_normal_vec, Rng};

/// Stream labels for [`rng::derived`].
const INIT_STREAM: u64 = 1;
const TRAIN_STREAM: u64 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl Default for Optimizer {
    fn default() -> Self {
        Self::adam()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Critic step size; `learning_rate` when absent.
    pub critic_learning_rate: Option<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub n_critic: usize,
    pub lambda_gp: f64,
    pub lambda_kl: f64,
    pub seed: u64,
    pub noise: NoiseSpec,
    pub optimizer: Optimizer,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            critic_learning_rate: None,
            epochs: 50,
            batch_size: 32,
            n_critic: 5,
            lambda_gp: 10.0,
            lambda_kl: 0.1,
            seed: 0,
            noise: NoiseSpec::default(),
            optimizer: Optimizer::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.learning_rate) {
            return Err(Error::Config(format!("learning_rate {} must be positive", self.learning_rate)));
        }
        if let Some(c) = self.critic_learning_rate.filter(|&c| !positive(c)) {
            return Err(Error::Config(format!("critic_learning_rate {c} must be positive")));
        }
        if self.batch_size == 0 || self.n_critic == 0 {
            return Err(Error::Config("batch_size and n_critic must be positive".into()));
        }
        if !(self.lambda_gp >= 0.0 && self.lambda_kl >= 0.0) {
            return Err(Error::Config("lambda_gp and lambda_kl must be non-negative".into()));
        }
        if let Optimizer::Adam { beta1, beta2, epsilon } = self.optimizer {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !positive(epsilon) {
                return Err(Error::Config("Adam needs betas in [0, 1) and a positive epsilon".into()));
            }
        }
        self.noise.validate()
    }
}

/// Moment accumulators over a flattened parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    kind: Optimizer,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl OptimizerState {
    pub fn new(kind: Optimizer, n_params: usize) -> Self {
        let n = if matches!(kind, Optimizer::Sgd) { 0 } else { n_params };
        Self {
            kind,
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One descent step on `params` with gradient `grads`.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), grads.len(), "parameter/gradient length mismatch");
        self.step += 1;
        match self.kind {
            Optimizer::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    *p -= lr * g;
                }
            }
            Optimizer::Adam { beta1, beta2, epsilon } => {
                assert_eq!(self.m.len(), params.len(), "optimizer state built for another model");
                let t = self.step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for i in 0..params.len() {
                    let g = grads[i];
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
                    let m_hat = self.m[i] / c1;
                    let v_hat = self.v[i] / c2;
                    params[i] -= lr * m_hat / (v_hat.sqrt() + epsilon);
                }
            }
        }
    }

    pub fn apply<P: Parameters>(&mut self, params: &mut P, grads: &P, lr: f64) {
        let mut flat = params.flatten();
        self.step(&mut flat, &grads.flatten(), lr);
        params.assign_flat(&flat);
    }
}

/// Means over one epoch of every loss term.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// `mean D(fake) − mean D(real)`, averaged over critic steps.
    pub critic_loss: f64,
    pub gp: f64,
    pub gen_loss: f64,
    pub kl: f64,
    pub var: f64,
}

pub fn write_history_csv(history: &[EpochRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    for r in history {
        w.serialize(r)
            .map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub generator: GeneratorParams,
    pub critic: CriticParams,
    pub history: Vec<EpochRecord>,
    /// Epoch (1-based) whose parameters were returned; 0 for the initial ones.
    pub selected_epoch: usize,
    pub rng: Rng,
}

/// Both networks with fresh parameters drawn from `seed`.
pub fn init_models(model: &ModelConfig, seed: u64) -> Result<(Generator, Critic, GeneratorParams, CriticParams)> {
    let generator = Generator::new(model)?;
    let critic = Critic::new(model)?;
    let mut rng = rng::derived(seed, INIT_STREAM);
    let gp = generator.init_params(&mut rng);
    let cp = critic.init_params(&mut rng);
    Ok((generator, critic, gp, cp))
}

fn check_finite(term: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{term} became non-finite ({v})")))
    }
}

struct Batch<'a> {
    windows: Vec<&'a [f64]>,
    targets: Vec<&'a [f64]>,
}

/// Trains from freshly initialized parameters.
pub fn train(model: &ModelConfig, config: &TrainConfig, windows: &WindowSet) -> Result<TrainOutcome> {
    let (g, c, gp, cp) = init_models(model, config.seed)?;
    train_from(&g, &c, gp, cp, config, windows, None::<fn(usize, &GeneratorParams, &CriticParams) -> Result<f64>>)
}

/// Runs `config.epochs` epochs starting from the given parameters.
///
/// When `select` is given it is called after each epoch and the parameters
/// with the highest returned score are kept; otherwise the final ones are.
pub fn train_from<F>(
    generator: &Generator,
    critic: &Critic,
    mut gen_params: GeneratorParams,
    mut critic_params: CriticParams,
    config: &TrainConfig,
    windows: &WindowSet,
    mut select: Option<F>,
) -> Result<TrainOutcome>
where
    F: FnMut(usize, &GeneratorParams, &CriticParams) -> Result<f64>,
{
    config.validate()?;
    if windows.is_empty() {
        return Err(Error::Input("no training windows".into()));
    }
    let d = windows.d;
    if d != generator.features() {
        return Err(Error::Shape(format!(
            "windows have {d} features, model expects {}",
            generator.features()
        )));
    }
    let mut rng = rng::derived(config.seed, TRAIN_STREAM);
    let mut gen_opt = OptimizerState::new(config.optimizer, gen_params.num_params());
    let mut critic_opt = OptimizerState::new(config.optimizer, critic_params.num_params());
    let noise = config.noise;
    let lr = config.learning_rate;
    let critic_lr = config.critic_learning_rate.unwrap_or(lr);
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, GeneratorParams, CriticParams)> = None;
    let mut order: Vec<usize> = (0..windows.len()).collect();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 5];
        let (mut critic_steps, mut gen_steps) = (0usize, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let batch = Batch {
                windows: chunk.iter().map(|&i| windows.inputs(i)).collect(),
                targets: chunk.iter().map(|&i| windows.target(i)).collect(),
            };
            let b = chunk.len() as f64;

            for _ in 0..config.n_critic {
                let mut grads = critic_params.zeros_like();
                let (mut loss, mut gp_total) = (0.0, 0.0);
                for (win, real) in batch.windows.iter().zip(&batch.targets) {
                    let eps = standard_normal_vec(&mut rng, d);
                    let fake = generator.forward(&gen_params, win, &eps, &noise, &mut rng)?.x_hat;

                    let pass = critic.forward(&critic_params, win, real, &noise, &mut rng)?;
                    let (g_real, _) = critic.backward(&critic_params, &pass, -1.0 / b)?;
                    grads.add_from(&g_real);
                    loss -= pass.score / b;

                    let pass = critic.forward(&critic_params, win, &fake, &noise, &mut rng)?;
                    let (g_fake, _) = critic.backward(&critic_params, &pass, 1.0 / b)?;
                    grads.add_from(&g_fake);
                    loss += pass.score / b;

                    if config.lambda_gp > 0.0 {
                        let u: f64 = rng.random();
                        let x_tilde = interpolate(real, &fake, u);
                        let (pen, mut g_pen) =
                            critic.penalty_and_grad(&critic_params, win, &x_tilde, &noise, &mut rng)?;
                        g_pen.scale(config.lambda_gp / b);
                        grads.add_from(&g_pen);
                        gp_total += pen / b;
                    }
                }
                check_finite("critic loss", loss)?;
                check_finite("gradient penalty", gp_total)?;
                if !grads.all_finite() {
                    return Err(Error::Numeric("critic gradient became non-finite".into()));
                }
                critic_opt.apply(&mut critic_params, &grads, critic_lr);
                sums[0] += loss;
                sums[1] += gp_total;
                critic_steps += 1;
            }

            let mut grads = gen_params.zeros_like();
            let (mut adv, mut mus, mut lvs) = (0.0, Vec::new(), Vec::new());
            let mut passes = Vec::with_capacity(chunk.len());
            for win in &batch.windows {
                let eps = standard_normal_vec(&mut rng, d);
                let pass = generator.forward(&gen_params, win, &eps, &noise, &mut rng)?;
                let cpass = critic.forward(&critic_params, win, &pass.x_hat, &noise, &mut rng)?;
                let (_, d_cand) = critic.backward(&critic_params, &cpass, 1.0)?;
                adv -= cpass.score / b;
                let d_xhat: Vec<f64> = d_cand.iter().map(|v| -v / b).collect();
                mus.extend_from_slice(&pass.out.mu);
                lvs.extend_from_slice(&pass.out.logvar);
                passes.push((pass, d_xhat));
            }
            let n_total = mus.len();
            let (d_mu_reg, d_lv_reg) = regularizer_grads(&mus, &lvs, config.lambda_kl, n_total);
            for (k, (pass, d_xhat)) in passes.iter().enumerate() {
                let (mut d_mu, mut d_lv) = reparameterize_backward(&pass.out.logvar, &pass.eps, d_xhat);
                crate::linalg::add_assign(&mut d_mu, &d_mu_reg[k * d..(k + 1) * d]);
                crate::linalg::add_assign(&mut d_lv, &d_lv_reg[k * d..(k + 1) * d]);
                grads.add_from(&generator.backward(&gen_params, pass, &d_mu, &d_lv)?);
            }
            let kl = kl_loss(&mus, &lvs);
            let var = var_penalty(&lvs);
            let gen_loss = adv + var + config.lambda_kl * kl;
            check_finite("KL term", kl)?;
            check_finite("variance term", var)?;
            check_finite("generator loss", gen_loss)?;
            if !grads.all_finite() {
                return Err(Error::Numeric("generator gradient became non-finite".into()));
            }
            gen_opt.apply(&mut gen_params, &grads, lr);
            sums[2] += gen_loss;
            sums[3] += kl;
            sums[4] += var;
            gen_steps += 1;
        }
        let cs = critic_steps as f64;
        let gs = gen_steps as f64;
        history.push(EpochRecord {
            epoch,
            critic_loss: sums[0] / cs,
            gp: sums[1] / cs,
            gen_loss: sums[2] / gs,
            kl: sums[3] / gs,
            var: sums[4] / gs,
        });
        if let Some(f) = select.as_mut() {
            let score = f(epoch, &gen_params, &critic_params)?;
            if best.as_ref().is_none_or(|(s, ..)| score > *s) {
                best = Some((score, epoch, gen_params.clone(), critic_params.clone()));
            }
        }
    }

    let (generator_out, critic_out, selected_epoch) = match best {
        Some((_, e, g, c)) => (g, c, e),
        None => (gen_params, critic_params, config.epochs),
    };
    Ok(TrainOutcome {
        generator: generator_out,
        critic: critic_out,
        history,
        selected_epoch,
        rng,
    })
}

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"QTSADCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

const KIND_F64: u8 = 0;
const KIND_TEXT: u8 = 1;
const KIND_U64: u8 = 2;

/// Everything besides tensors, stored as TOML in the `meta` section.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Conditioning steps per window.
    pub window: usize,
    #[serde(default)]
    pub normalization: Option<NormalizationStats>,
}

/// Position of the training random stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(seed: u64, rng: &Rng) -> Self {
        Self {
            seed,
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> Rng {
        let mut r = rng::seeded(self.seed);
        r.set_stream(self.stream);
        r.set_word_pos(self.word_pos);
        r
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub epoch: u64,
    pub rng: RngState,
    pub generator: GeneratorParams,
    pub critic: CriticParams,
}

struct Section {
    name: String,
    kind: u8,
    shape: Vec<u64>,
    payload: Vec<u8>,
}

impl Checkpoint {
    pub fn from_outcome(meta: CheckpointMeta, outcome: &TrainOutcome) -> Self {
        Self {
            rng: RngState::capture(meta.train.seed, &outcome.rng),
            epoch: outcome.selected_epoch as u64,
            generator: outcome.generator.clone(),
            critic: outcome.critic.clone(),
            meta,
        }
    }

    fn sections(&self) -> Vec<Section> {
        let meta = toml::to_string(&self.meta).expect("checkpoint metadata serializes");
        let mut out = vec![
            Section {
                name: "meta".into(),
                kind: KIND_TEXT,
                shape: vec![meta.len() as u64],
                payload: meta.into_bytes(),
            },
            Section {
                name: "state".into(),
                kind: KIND_U64,
                shape: vec![5],
                payload: [
                    self.epoch,
                    self.rng.seed,
                    self.rng.stream,
                    (self.rng.word_pos >> 64) as u64,
                    self.rng.word_pos as u64,
                ]
                .iter()
                .flat_map(|v| v.to_le_bytes())
                .collect(),
            },
        ];
        let mut push = |name: &str, shape: &[usize], values: &[f64]| {
            out.push(Section {
                name: name.to_string(),
                kind: KIND_F64,
                shape: shape.iter().map(|&s| s as u64).collect(),
                payload: values.iter().flat_map(|v| v.to_le_bytes()).collect(),
            });
        };
        self.generator.visit("generator.", &mut push);
        self.critic.visit("critic.", &mut push);
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let sections = self.sections();
        let mut dir_len = 0usize;
        for s in &sections {
            dir_len += 2 + s.name.len() + 1 + 1 + 8 * s.shape.len() + 16;
        }
        let header_len = 8 + 4 + 4;
        let mut offset = (header_len + dir_len) as u64;
        let mut buf = Vec::with_capacity(offset as usize + sections.iter().map(|s| s.payload.len()).sum::<usize>());
        buf.extend_from_slice(&CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(sections.len() as u32).to_le_bytes());
        for s in &sections {
            buf.extend_from_slice(&(s.name.len() as u16).to_le_bytes());
            buf.extend_from_slice(s.name.as_bytes());
            buf.push(s.kind);
            buf.push(s.shape.len() as u8);
            for dim in &s.shape {
                buf.extend_from_slice(&dim.to_le_bytes());
            }
            buf.extend_from_slice(&offset.to_le_bytes());
            buf.extend_from_slice(&(s.payload.len() as u64).to_le_bytes());
            offset += s.payload.len() as u64;
        }
        for s in &sections {
            buf.extend_from_slice(&s.payload);
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(8, "header")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::parse("header", "not a checkpoint file (bad magic bytes)"));
        }
        let version = r.u32("header")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::parse(
                "header",
                format!("checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})"),
            ));
        }
        let count = r.u32("header")? as usize;
        let mut dir = Vec::with_capacity(count);
        for i in 0..count {
            let ctx = format!("directory entry {i}");
            let name_len = u16::from_le_bytes(r.take(2, &ctx)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(r.take(name_len, &ctx)?.to_vec())
                .map_err(|_| Error::parse(&ctx, "section name is not UTF-8"))?;
            let kind = r.take(1, &name)?[0];
            let rank = r.take(1, &name)?[0] as usize;
            let shape = (0..rank).map(|_| r.u64(&name)).collect::<Result<Vec<_>>>()?;
            let offset = r.u64(&name)? as usize;
            let len = r.u64(&name)? as usize;
            dir.push((name, kind, shape, offset, len));
        }
        let payload = |name: &str, offset: usize, len: usize| payload(bytes, name, offset, len);
        let find = |name: &str, kind: u8| {
            dir.iter()
                .find(|e| e.0 == name)
                .filter(|e| e.1 == kind)
                .ok_or_else(|| Error::parse(name, "section missing or of the wrong kind"))
        };

        let (_, _, _, off, len) = find("meta", KIND_TEXT)?;
        let text = std::str::from_utf8(payload("meta", *off, *len)?)
            .map_err(|_| Error::parse("meta", "not UTF-8"))?;
        let meta: CheckpointMeta = toml::from_str(text).map_err(|e| Error::parse("meta", e.to_string()))?;

        let (_, _, _, off, len) = find("state", KIND_U64)?;
        let state = payload("state", *off, *len)?;
        if state.len() != 40 {
            return Err(Error::parse("state", "expected five u64 values"));
        }
        let s: Vec<u64> = state
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
            .collect();

        let generator_net = Generator::new(&meta.model).map_err(|e| Error::parse("meta", e.to_string()))?;
        let critic_net = Critic::new(&meta.model).map_err(|e| Error::parse("meta", e.to_string()))?;
        let mut generator = generator_net.zero_params();
        let mut critic = critic_net.zero_params();
        fill_params(&mut generator, "generator.", &dir, bytes)?;
        fill_params(&mut critic, "critic.", &dir, bytes)?;
        Ok(Self {
            meta,
            epoch: s[0],
            rng: RngState {
                seed: s[1],
                stream: s[2],
                word_pos: (u128::from(s[3]) << 64) | u128::from(s[4]),
            },
            generator,
            critic,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

type DirEntry = (String, u8, Vec<u64>, usize, usize);

fn payload<'a>(bytes: &'a [u8], name: &str, offset: usize, len: usize) -> Result<&'a [u8]> {
    offset
        .checked_add(len)
        .filter(|&end| end <= bytes.len())
        .map(|end| &bytes[offset..end])
        .ok_or_else(|| Error::parse(name, "payload truncated"))
}

fn fill_params<P: Parameters>(
    params: &mut P,
    prefix: &str,
    dir: &[DirEntry],
    bytes: &[u8],
) -> Result<()> {
    let mut expected = Vec::new();
    params.visit(prefix, &mut |name, shape, _| expected.push((name.to_string(), shape.to_vec())));
    let mut tensors = Vec::with_capacity(expected.len());
    for (name, shape) in &expected {
        let entry = dir
            .iter()
            .find(|e| &e.0 == name)
            .ok_or_else(|| Error::parse(name, "tensor missing"))?;
        if entry.1 != KIND_F64 {
            return Err(Error::parse(name, "not a float tensor"));
        }
        let want: Vec<u64> = shape.iter().map(|&s| s as u64).collect();
        if entry.2 != want {
            return Err(Error::parse(name, format!("shape {:?}, expected {want:?}", entry.2)));
        }
        let raw = payload(bytes, name, entry.3, entry.4)?;
        let n: usize = shape.iter().product();
        if raw.len() != 8 * n {
            return Err(Error::parse(name, format!("{} bytes for {n} values", raw.len())));
        }
        tensors.push(
            raw.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect::<Vec<f64>>(),
        );
    }
    let mut it = tensors.into_iter();
    params.visit_mut(&mut |v| v.copy_from_slice(&it.next().expect("one tensor per slot")));
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, section: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::parse(section, "file truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, section: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, section)?.try_into().unwrap()))
    }

    fn u64(&mut self, section: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, section)?.try_into().unwrap()))
    }
}
