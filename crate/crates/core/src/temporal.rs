//! Temporal aggregation: fuses per-frame audio-semantic vectors into one
//! output through positionally embedded attention.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{cosine_sim, derive_seed, l2_normalize, seeded, AudioEmbedding, Split, SyntheticWorld};
use crate::error::{Error, Result};
use crate::nn::{cosine_kl_terms, reparameterize, reparameterize_array, AdamW, AdamWConfig, ClsPooler, Graph, ParamSet, Posterior, Real};

pub const FRAME_COUNT: usize = 64;
pub const POSITION_BASE: f64 = 1024.0;
pub const DEFAULT_TA_KL_WEIGHT: f64 = 1e-3;
pub const FRAME_SCHEMA: &str = "ssv2a-frames/1";
const PREFIX: &str = "ta";

/// `sin(t / base^(index / width))` for even `index`, and the cosine at
/// `index - 1` for odd `index`.
pub fn positional_embedding(index: usize, t: f64, width: usize) -> Result<f64> {
    if index >= width {
        return Err(Error::Domain(format!("positional index {index} outside width {width}")));
    }
    let even = index - index % 2;
    let angle = t / POSITION_BASE.powf(even as f64 / width as f64);
    Ok(if index.is_multiple_of(2) { angle.sin() } else { angle.cos() })
}

/// Row `t - 1` holds the embedding of timestamp `t` for `t` in `1..=frames`.
pub fn positional_table<F: Real>(frames: usize, width: usize) -> Array2<F> {
    Array2::from_shape_fn((frames, width), |(r, c)| {
        F::of(positional_embedding(c, (r + 1) as f64, width).expect("index below width"))
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaArch {
    pub width: usize,
    pub head_layers: Vec<usize>,
    pub ff_hidden: usize,
}

impl TaArch {
    /// 512-wide frames, heads 768/640/512.
    pub fn full() -> Self {
        Self {
            width: 512,
            head_layers: vec![768, 640, 512],
            ff_hidden: 1024,
        }
    }

    pub fn desk() -> Self {
        Self {
            width: 48,
            head_layers: vec![64, 56, 48],
            ff_hidden: 96,
        }
    }

    pub fn tiny() -> Self {
        Self {
            width: 4,
            head_layers: vec![6, 5, 4],
            ff_hidden: 8,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.width == 0 || self.ff_hidden == 0 {
            return Err(Error::Config("temporal aggregation widths must be positive".into()));
        }
        if self.head_layers.last() != Some(&self.width) {
            return Err(Error::Config(format!(
                "temporal aggregation heads must end at width {}",
                self.width
            )));
        }
        Ok(())
    }
}

/// Exactly `FRAME_COUNT` unit-norm embeddings ordered by timestamp.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence {
    frames: Vec<Vec<f32>>,
}

impl FrameSequence {
    pub fn new(frames: Vec<Vec<f32>>) -> Result<Self> {
        if frames.len() != FRAME_COUNT {
            return Err(Error::Precondition(format!(
                "expected {FRAME_COUNT} frames, got {}",
                frames.len()
            )));
        }
        let width = frames[0].len();
        for (t, f) in frames.iter().enumerate() {
            if f.len() != width {
                return Err(Error::dim(format!("frame {}", t + 1), width, f.len()));
            }
            let n = crate::data::l2_norm(f);
            if (n - 1.0).abs() > 1e-4 {
                return Err(Error::Domain(format!("frame {} has norm {n}, expected unit norm", t + 1)));
            }
        }
        Ok(Self { frames })
    }

    /// Normalises each frame before checking.
    pub fn normalized(frames: Vec<Vec<f32>>) -> Result<Self> {
        Self::new(frames.iter().map(|f| l2_normalize(f)).collect::<Result<_>>()?)
    }

    pub fn frames(&self) -> &[Vec<f32>] {
        &self.frames
    }

    pub fn width(&self) -> usize {
        self.frames[0].len()
    }

    pub fn swap(&mut self, a: usize, b: usize) {
        self.frames.swap(a, b);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaModel<F: Real = f32> {
    pub arch: TaArch,
    pub params: ParamSet<F>,
    pub pooler: ClsPooler,
    positions: Array2<F>,
}

impl<F: Real> TaModel<F> {
    fn parts(arch: &TaArch) -> (ClsPooler, Array2<F>) {
        (
            ClsPooler::new(PREFIX, arch.width, arch.ff_hidden, &arch.head_layers),
            positional_table(FRAME_COUNT, arch.width),
        )
    }

    pub fn new<R: Rng + ?Sized>(arch: TaArch, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let (pooler, positions) = Self::parts(&arch);
        let mut params = ParamSet::new();
        pooler.init(&mut params, rng);
        Ok(Self {
            arch,
            params,
            pooler,
            positions,
        })
    }

    pub fn from_params(arch: TaArch, params: ParamSet<F>) -> Result<Self> {
        let reference = Self::new(arch.clone(), &mut seeded(0))?;
        crate::manifold::check_tensors(&reference.params, &params)?;
        let (pooler, positions) = Self::parts(&arch);
        Ok(Self {
            arch,
            params,
            pooler,
            positions,
        })
    }

    pub fn cast<G: Real>(&self) -> TaModel<G> {
        TaModel {
            arch: self.arch.clone(),
            params: self.params.cast(),
            pooler: self.pooler.clone(),
            positions: self.positions.mapv(|x| G::of(x.as_f64())),
        }
    }

    /// Frame embeddings plus their positional embeddings.
    pub fn tokens(&self, frames: &FrameSequence) -> Result<Array2<F>> {
        if frames.width() != self.arch.width {
            return Err(Error::dim("frame width", self.arch.width, frames.width()));
        }
        let f = &frames.frames;
        Ok(Array2::from_shape_fn((FRAME_COUNT, self.arch.width), |(t, c)| {
            F::of(f[t][c] as f64) + self.positions[[t, c]]
        }))
    }

    pub fn posterior(&self, g: &mut Graph<F>, params: &ParamSet<F>, batch: &[FrameSequence]) -> Result<Posterior> {
        let inputs = batch.iter().map(|f| self.tokens(f)).collect::<Result<Vec<_>>>()?;
        self.pooler.posterior(g, params, &inputs)
    }
}

/// `a = normalize(omega(frames + pos))`, sampled or at the posterior mean.
pub fn ta_forward<R: Rng + ?Sized>(
    model: &TaModel<f32>,
    frames: &FrameSequence,
    rng: &mut R,
    sample: bool,
) -> Result<AudioEmbedding> {
    let (mu, lv) = model.pooler.posterior_arrays(&model.params, &model.tokens(frames)?)?;
    let raw = if sample { reparameterize_array(&mu, &lv, rng) } else { mu };
    AudioEmbedding::normalized(raw.iter().copied().collect())
}

/// Train-mode `1 - sim(a, target) + kl_weight * KL` for one sequence.
pub fn ta_loss<F: Real, R: Rng + ?Sized>(
    model: &TaModel<F>,
    frames: &FrameSequence,
    target: &[f32],
    kl_weight: f64,
    rng: &mut R,
) -> Result<f64> {
    let mut g = Graph::new();
    let p = model.posterior(&mut g, &model.params, std::slice::from_ref(frames))?;
    let out = reparameterize(&mut g, p.mu, p.logvar, rng);
    let t = Array2::from_shape_fn((1, target.len()), |(_, j)| F::of(target[j] as f64));
    let (total, _, _) = cosine_kl_terms(&mut g, p, out, &t, kl_weight)?;
    g.check_finite()?;
    Ok(g.scalar(total).as_f64())
}

/// One video: its frames, the observed audio target and, when known, the
/// noise-free target used for evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameRecord {
    #[serde(default)]
    pub schema: Option<String>,
    pub id: String,
    pub split: Split,
    pub frames: Vec<Vec<f32>>,
    pub target: Vec<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<Vec<f32>>,
}

impl FrameRecord {
    pub fn sequence(&self) -> Result<FrameSequence> {
        FrameSequence::new(self.frames.clone())
    }

    pub fn eval_target(&self) -> &[f32] {
        self.reference.as_deref().unwrap_or(&self.target)
    }
}

pub fn write_frames<W: Write>(records: &[FrameRecord], mut w: W) -> Result<()> {
    for r in records {
        let mut r = r.clone();
        r.schema = Some(FRAME_SCHEMA.to_string());
        serde_json::to_writer(&mut w, &r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_frames(records: &[FrameRecord], path: impl AsRef<Path>) -> Result<()> {
    write_frames(records, BufWriter::new(File::create(path)?))
}

/// Parses JSON-Lines frame records, checking the frame count and widths.
pub fn read_frames<R: BufRead>(r: R) -> Result<Vec<FrameRecord>> {
    let mut out = Vec::new();
    let mut width: Option<usize> = None;
    for (i, line) in r.lines().enumerate() {
        let lineno = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: FrameRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        let schema_err = |message: String| Error::Schema { line: lineno, message };
        if let Some(s) = &rec.schema {
            if s != FRAME_SCHEMA {
                return Err(schema_err(format!("unsupported schema `{s}`")));
            }
        }
        if rec.frames.len() != FRAME_COUNT {
            return Err(schema_err(format!("expected {FRAME_COUNT} frames, got {}", rec.frames.len())));
        }
        let w = *width.get_or_insert(rec.target.len());
        let widths_ok = rec.target.len() == w
            && rec.frames.iter().all(|f| f.len() == w)
            && rec.reference.as_ref().is_none_or(|r| r.len() == w);
        if !widths_ok {
            return Err(schema_err(format!("embedding widths differ from {w}")));
        }
        let values = rec.frames.iter().flatten().chain(&rec.target).chain(rec.reference.iter().flatten());
        if values.into_iter().any(|x| !x.is_finite()) {
            return Err(schema_err("non-finite embedding value".into()));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn load_frames(path: impl AsRef<Path>) -> Result<Vec<FrameRecord>> {
    read_frames(BufReader::new(File::open(path)?))
}

/// Synthetic videos whose sound drifts from one class to another at a
/// random frame. Frames are noisy audio samples of the current class; the
/// target is a noisy observation of the frame-weighted prototype mixture.
/// Every fifth video goes to the test split.
pub fn synth_frames(world: &SyntheticWorld, count: usize, seed: u64) -> Result<Vec<FrameRecord>> {
    let mut rng: ChaCha8Rng = seeded(seed);
    let k = world.num_classes();
    let d = world.config.dims.audio;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let mut classes: Vec<usize> = (0..k).collect();
        classes.shuffle(&mut rng);
        let (from, to) = (classes[0], classes[1]);
        let switch = rng.random_range(1..FRAME_COUNT);
        let timeline: Vec<usize> = (0..FRAME_COUNT).map(|t| if t < switch { from } else { to }).collect();
        let frames = timeline.iter().map(|&c| world.sample_audio(c, &mut rng)).collect();
        let mut mix = vec![0.0f32; d];
        for &c in &timeline {
            for (m, &x) in mix.iter_mut().zip(&world.prototypes_a[c]) {
                *m += x;
            }
        }
        let reference = l2_normalize(&mix)?;
        let target: Vec<f32> = {
            let sigma = world.config.noise_sigma as f32;
            let noisy: Vec<f32> = reference
                .iter()
                .map(|&x| x + sigma * crate::nn::tensor::standard_normal::<f32, _>(&mut rng))
                .collect();
            l2_normalize(&noisy)?
        };
        out.push(FrameRecord {
            schema: None,
            id: format!("video_{i:05}"),
            split: if i % 5 == 4 { Split::Test } else { Split::Train },
            frames,
            target,
            reference: Some(reference),
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    /// Weight of the K-L term; zero gives the plain cosine objective.
    pub kl_weight: f64,
    pub seed: u64,
}

impl Default for TaTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            optimizer: AdamWConfig::default(),
            kl_weight: DEFAULT_TA_KL_WEIGHT,
            seed: 0,
        }
    }
}

impl TaTrainConfig {
    /// Settings for the small synthetic world: 40 epochs at lr 1e-3.
    pub fn desk() -> Self {
        Self {
            epochs: 40,
            optimizer: AdamWConfig {
                lr: 1e-3,
                ..AdamWConfig::default()
            },
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaEpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub cosine: f64,
    pub kl: f64,
    pub eval_similarity: f64,
}

#[derive(Clone, Debug)]
pub struct TaTrainOutput {
    pub model: TaModel<f32>,
    pub log: Vec<TaEpochLog>,
}

/// Mean cosine between eval-mode outputs and each record's reference (or
/// target).
pub fn ta_similarity(model: &TaModel<f32>, records: &[FrameRecord]) -> Result<f64> {
    if records.is_empty() {
        return Ok(0.0);
    }
    let mut rng = seeded(0);
    let mut total = 0.0;
    for r in records {
        let a = ta_forward(model, &r.sequence()?, &mut rng, false)?;
        total += cosine_sim(&a.values, r.eval_target())?;
    }
    Ok(total / records.len() as f64)
}

/// Trains a fresh aggregator on the train-split records, scoring the test
/// split (or the train split when there is none) after each epoch.
pub fn train_ta(records: &[FrameRecord], arch: &TaArch, cfg: &TaTrainConfig) -> Result<TaTrainOutput> {
    let train: Vec<&FrameRecord> = records.iter().filter(|r| r.split == Split::Train).collect();
    if train.is_empty() {
        return Err(Error::Precondition("temporal aggregation needs train-split frame records".into()));
    }
    let mut eval: Vec<FrameRecord> = records.iter().filter(|r| r.split == Split::Test).cloned().collect();
    if eval.is_empty() {
        eval = train.iter().map(|&r| r.clone()).collect();
    }
    let seqs = train.iter().map(|r| r.sequence()).collect::<Result<Vec<_>>>()?;
    for r in &train {
        if r.target.len() != arch.width {
            return Err(Error::dim("temporal target", arch.width, r.target.len()));
        }
    }
    let mut model = TaModel::<f32>::new(arch.clone(), &mut seeded(derive_seed(cfg.seed, 5)))?;
    let mut rng = seeded(derive_seed(cfg.seed, 6));
    let mut opt = AdamW::<f32>::new(cfg.optimizer.clone());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 3];
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let batch: Vec<FrameSequence> = chunk.iter().map(|&i| seqs[i].clone()).collect();
            let target = Array2::from_shape_fn((chunk.len(), arch.width), |(r, j)| train[chunk[r]].target[j]);
            let last_good = model.params.clone();
            let mut g = Graph::new();
            let post = model.posterior(&mut g, &model.params, &batch)?;
            let out = reparameterize(&mut g, post.mu, post.logvar, &mut rng);
            let (total, cos, kl) = cosine_kl_terms(&mut g, post, out, &target, cfg.kl_weight)?;
            let diverged = || Error::Diverged {
                stage: "ta".into(),
                epoch,
                last_good: Some(Box::new(last_good.clone())),
            };
            if g.check_finite().is_err() {
                return Err(diverged());
            }
            let grads = g.backward(total);
            if opt.step(&mut model.params, &grads, |_| true).is_err() {
                return Err(diverged());
            }
            for (s, v) in sums.iter_mut().zip([total, cos, kl]) {
                *s += g.scalar(v) as f64;
            }
            batches += 1;
        }
        let n = batches.max(1) as f64;
        log.push(TaEpochLog {
            epoch,
            loss: sums[0] / n,
            cosine: sums[1] / n,
            kl: sums[2] / n,
            eval_similarity: ta_similarity(&model, &eval)?,
        });
    }
    Ok(TaTrainOutput { model, log })
}
