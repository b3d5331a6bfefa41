//! Single-source visual/audio pairs, scene manifests and the synthetic
//! embedding world that stands in for pretrained encoders.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::tensor::standard_normal;

pub const MANIFEST_SCHEMA: &str = "ssv2a-manifest/1";
pub const SCENE_SCHEMA: &str = "ssv2a-scene/1";
pub const UNIT_NORM_TOLERANCE: f64 = 1e-5;
/// Source slots available to a scene; the 64th token is reserved.
pub const MAX_SCENE_SOURCES: usize = 63;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingDims {
    pub visual: usize,
    pub audio: usize,
}

impl EmbeddingDims {
    pub const CLIP_CLAP: EmbeddingDims = EmbeddingDims { visual: 768, audio: 512 };
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VisualEmbedding(pub Vec<f32>);

#[derive(Clone, Debug, PartialEq)]
pub struct AudioEmbedding {
    pub values: Vec<f32>,
    pub unit_norm: bool,
}

impl AudioEmbedding {
    pub fn new(values: Vec<f32>) -> Self {
        Self { values, unit_norm: false }
    }

    /// Normalises to unit l2 norm and sets the flag.
    pub fn normalized(values: Vec<f32>) -> Result<Self> {
        let values = l2_normalize(&values)?;
        Ok(Self { values, unit_norm: true })
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.values)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Clean,
    Curated,
    Translated,
}

impl Provenance {
    pub fn is_noisy(self) -> bool {
        !matches!(self, Provenance::Clean)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SourcePair {
    pub id: String,
    pub class_label: String,
    pub visual: VisualEmbedding,
    pub audio: AudioEmbedding,
    pub provenance: Provenance,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct SourcePairDataset {
    pub pairs: Vec<SourcePair>,
}

impl SourcePairDataset {
    pub fn new(pairs: Vec<SourcePair>) -> Self {
        Self { pairs }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn split(&self, split: Split) -> Vec<&SourcePair> {
        self.pairs.iter().filter(|p| p.split == split).collect()
    }

    /// Distinct class labels in first-appearance order.
    pub fn classes(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for p in &self.pairs {
            if !out.contains(&p.class_label) {
                out.push(p.class_label.clone());
            }
        }
        out
    }

    pub fn dims(&self) -> Option<EmbeddingDims> {
        self.pairs.first().map(|p| EmbeddingDims {
            visual: p.visual.0.len(),
            audio: p.audio.values.len(),
        })
    }
}

pub fn l2_norm<F: num_traits::ToPrimitive + Copy>(v: &[F]) -> f64 {
    v.iter()
        .map(|x| {
            let x = x.to_f64().unwrap_or(f64::NAN);
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

pub fn l2_normalize(v: &[f32]) -> Result<Vec<f32>> {
    let n = l2_norm(v);
    if n == 0.0 || !n.is_finite() {
        return Err(Error::Domain("cannot normalise a zero or non-finite vector".into()));
    }
    Ok(v.iter().map(|&x| (x as f64 / n) as f32).collect())
}

/// `u . v / (|u| |v|)`, accumulated in 64-bit.
pub fn cosine_sim<F: num_traits::ToPrimitive + Copy>(u: &[F], v: &[F]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::dim("cosine_sim", u.len(), v.len()));
    }
    let nu = l2_norm(u);
    let nv = l2_norm(v);
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::Domain("cosine similarity of a zero vector".into()));
    }
    let dot: f64 = u
        .iter()
        .zip(v)
        .map(|(a, b)| a.to_f64().unwrap_or(f64::NAN) * b.to_f64().unwrap_or(f64::NAN))
        .sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// Stacks equally sized rows into a matrix.
pub fn stack_rows<'a>(rows: impl IntoIterator<Item = &'a [f32]>, width: usize) -> Array2<f32> {
    let flat: Vec<f32> = rows.into_iter().flat_map(|r| r.iter().copied()).collect();
    let n = flat.len() / width.max(1);
    Array2::from_shape_vec((n, width), flat).expect("rows share a width")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldConfig {
    pub num_classes: usize,
    pub dims: EmbeddingDims,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl WorldConfig {
    /// K=16 classes, sigma=0.1.
    pub fn desk(dims: EmbeddingDims, seed: u64) -> Self {
        Self {
            num_classes: 16,
            dims,
            noise_sigma: 0.1,
            seed,
        }
    }
}

/// Class prototypes on the unit sphere of each modality. Class `c` pairs the
/// visual prototype `c` with the audio prototype `c`.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticWorld {
    pub config: WorldConfig,
    pub prototypes_v: Vec<Vec<f32>>,
    pub prototypes_a: Vec<Vec<f32>>,
}

fn unit_gaussian(rng: &mut ChaCha8Rng, d: usize) -> Vec<f32> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| standard_normal::<f64, _>(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.iter().map(|x| (x / n) as f32).collect();
        }
    }
}

impl SyntheticWorld {
    pub fn new(config: WorldConfig) -> Result<Self> {
        if config.num_classes < 2 {
            return Err(Error::Config("synthetic world needs at least 2 classes".into()));
        }
        if config.dims.visual == 0 || config.dims.audio == 0 {
            return Err(Error::Config("embedding widths must be positive".into()));
        }
        if config.noise_sigma.is_nan() || config.noise_sigma < 0.0 {
            return Err(Error::Config("noise_sigma must be non-negative".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let prototypes_v = (0..config.num_classes)
            .map(|_| unit_gaussian(&mut rng, config.dims.visual))
            .collect();
        let prototypes_a = (0..config.num_classes)
            .map(|_| unit_gaussian(&mut rng, config.dims.audio))
            .collect();
        Ok(Self {
            config,
            prototypes_v,
            prototypes_a,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn class_label(c: usize) -> String {
        format!("class_{c:02}")
    }

    pub fn labels(&self) -> Vec<String> {
        (0..self.num_classes()).map(Self::class_label).collect()
    }

    pub fn class_index(&self, label: &str) -> Option<usize> {
        label
            .strip_prefix("class_")
            .and_then(|s| s.parse().ok())
            .filter(|&c| c < self.num_classes())
    }

    /// `normalize(prototype + sigma * eps)` for each given noise level.
    fn noisy(&self, proto: &[f32], sigmas: &[f64], rng: &mut ChaCha8Rng) -> Vec<f32> {
        let mut v: Vec<f64> = proto.iter().map(|&x| x as f64).collect();
        for &s in sigmas {
            for x in v.iter_mut() {
                *x += s * standard_normal::<f64, _>(rng);
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| (x / n) as f32).collect()
    }

    pub fn sample_visual(&self, class: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
        self.noisy(&self.prototypes_v[class], &[self.config.noise_sigma], rng)
    }

    pub fn sample_audio(&self, class: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
        self.noisy(&self.prototypes_a[class], &[self.config.noise_sigma], rng)
    }

    /// Unit-norm mean of the audio prototypes of `classes`.
    pub fn mixed_audio(&self, classes: &[usize]) -> Result<Vec<f32>> {
        let d = self.config.dims.audio;
        let mut acc = vec![0.0f32; d];
        for &c in classes {
            for (a, &x) in acc.iter_mut().zip(&self.prototypes_a[c]) {
                *a += x;
            }
        }
        l2_normalize(&acc)
    }

    /// `mixed_audio(classes)` observed with the world's noise.
    pub fn sample_mixed_audio(&self, classes: &[usize], rng: &mut ChaCha8Rng) -> Result<Vec<f32>> {
        let mean = self.mixed_audio(classes)?;
        Ok(self.noisy(&mean, &[self.config.noise_sigma], rng))
    }

    /// Nearest visual prototype by cosine similarity.
    pub fn nearest_visual_class(&self, v: &[f32]) -> Result<usize> {
        nearest(&self.prototypes_v, v)
    }

    pub fn nearest_audio_class(&self, a: &[f32]) -> Result<usize> {
        nearest(&self.prototypes_a, a)
    }
}

fn nearest(protos: &[Vec<f32>], x: &[f32]) -> Result<usize> {
    let mut best = (0, f64::NEG_INFINITY);
    for (c, p) in protos.iter().enumerate() {
        let s = cosine_sim(p, x)?;
        if s > best.1 {
            best = (c, s);
        }
    }
    Ok(best.0)
}

/// Synthetic pair dataset. Per class, a quarter of the pairs (at least one)
/// go to the test split. `noisy_fraction` of each class's train pairs are
/// marked `curated` and receive an extra `2 sigma` of noise on both sides.
pub fn synth_dataset(world: &SyntheticWorld, pairs_per_class: usize, noisy_fraction: f64) -> Result<SourcePairDataset> {
    if pairs_per_class < 2 {
        return Err(Error::Config("pairs_per_class must be at least 2 for a train/test split".into()));
    }
    if !(0.0..=1.0).contains(&noisy_fraction) {
        return Err(Error::Config("noisy_fraction must lie in [0, 1]".into()));
    }
    let sigma = world.config.noise_sigma;
    let n_test = ((pairs_per_class as f64 * 0.25).round() as usize).max(1);
    let n_train = pairs_per_class - n_test;
    let n_noisy = (noisy_fraction * n_train as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(world.config.seed ^ 0x5eed_da7a);
    let mut pairs = Vec::with_capacity(world.num_classes() * pairs_per_class);
    for c in 0..world.num_classes() {
        for k in 0..pairs_per_class {
            let split = if k < n_train { Split::Train } else { Split::Test };
            let noisy = split == Split::Train && k < n_noisy;
            let sigmas: &[f64] = if noisy { &[sigma, 2.0 * sigma] } else { &[sigma] };
            let visual = world.noisy(&world.prototypes_v[c], sigmas, &mut rng);
            let audio = world.noisy(&world.prototypes_a[c], sigmas, &mut rng);
            pairs.push(SourcePair {
                id: format!("c{c:02}-{k:03}"),
                class_label: SyntheticWorld::class_label(c),
                visual: VisualEmbedding(visual),
                audio: AudioEmbedding { values: audio, unit_norm: true },
                provenance: if noisy { Provenance::Curated } else { Provenance::Clean },
                split,
            });
        }
    }
    Ok(SourcePairDataset { pairs })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestLine {
    #[serde(default)]
    schema: Option<String>,
    id: String,
    class: String,
    split: Split,
    provenance: Provenance,
    visual: Vec<f32>,
    audio: Vec<f32>,
    #[serde(default)]
    audio_unit_norm: bool,
}

pub fn write_manifest<W: Write>(dataset: &SourcePairDataset, mut w: W) -> Result<()> {
    for p in &dataset.pairs {
        let line = ManifestLine {
            schema: Some(MANIFEST_SCHEMA.to_string()),
            id: p.id.clone(),
            class: p.class_label.clone(),
            split: p.split,
            provenance: p.provenance,
            visual: p.visual.0.clone(),
            audio: p.audio.values.clone(),
            audio_unit_norm: p.audio.unit_norm,
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_manifest(dataset: &SourcePairDataset, path: impl AsRef<Path>) -> Result<()> {
    write_manifest(dataset, BufWriter::new(File::create(path)?))
}

/// Parses a JSON-Lines manifest. Widths are checked against `expected`, or
/// against the first record when `expected` is `None`. Blank lines are
/// skipped; line numbers in errors are 1-based.
pub fn read_manifest<R: BufRead>(r: R, expected: Option<EmbeddingDims>) -> Result<SourcePairDataset> {
    let mut dims = expected;
    let mut pairs = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let lineno = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        let schema_err = |message: String| Error::Schema { line: lineno, message };
        if let Some(s) = &rec.schema {
            if s != MANIFEST_SCHEMA {
                return Err(schema_err(format!("unsupported schema `{s}`")));
            }
        }
        if rec.class.is_empty() {
            return Err(schema_err("empty class label".into()));
        }
        let d = *dims.get_or_insert(EmbeddingDims {
            visual: rec.visual.len(),
            audio: rec.audio.len(),
        });
        if rec.visual.len() != d.visual {
            return Err(schema_err(format!(
                "visual embedding has width {}, expected {}",
                rec.visual.len(),
                d.visual
            )));
        }
        if rec.audio.len() != d.audio {
            return Err(schema_err(format!(
                "audio embedding has width {}, expected {}",
                rec.audio.len(),
                d.audio
            )));
        }
        if rec.visual.iter().chain(&rec.audio).any(|x| !x.is_finite()) {
            return Err(schema_err("non-finite embedding value".into()));
        }
        if rec.audio_unit_norm {
            let n = l2_norm(&rec.audio);
            if (n - 1.0).abs() > UNIT_NORM_TOLERANCE {
                return Err(schema_err(format!("audio flagged unit-norm but has norm {n}")));
            }
        }
        pairs.push(SourcePair {
            id: rec.id,
            class_label: rec.class,
            visual: VisualEmbedding(rec.visual),
            audio: AudioEmbedding {
                values: rec.audio,
                unit_norm: rec.audio_unit_norm,
            },
            provenance: rec.provenance,
            split: rec.split,
        });
    }
    Ok(SourcePairDataset { pairs })
}

pub fn load_manifest(path: impl AsRef<Path>, expected: Option<EmbeddingDims>) -> Result<SourcePairDataset> {
    read_manifest(BufReader::new(File::open(path)?), expected)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Modality {
    Visual,
    TextTranslated,
    Audio,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSource {
    pub modality: Modality,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub visual: Option<VisualEmbedding>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audio: Option<Vec<f32>>,
}

impl SceneSource {
    pub fn visual(v: Vec<f32>) -> Self {
        Self {
            modality: Modality::Visual,
            visual: Some(VisualEmbedding(v)),
            audio: None,
        }
    }

    pub fn audio(a: Vec<f32>) -> Self {
        Self {
            modality: Modality::Audio,
            visual: None,
            audio: Some(a),
        }
    }
}

/// Ordered sound sources of one scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneManifest {
    #[serde(default = "scene_schema")]
    pub schema: String,
    pub sources: Vec<SceneSource>,
}

fn scene_schema() -> String {
    SCENE_SCHEMA.to_string()
}

impl SceneManifest {
    pub fn new(sources: Vec<SceneSource>) -> Self {
        Self {
            schema: scene_schema(),
            sources,
        }
    }

    pub fn validate(&self, dims: EmbeddingDims) -> Result<()> {
        if self.schema != SCENE_SCHEMA {
            return Err(Error::Input(format!("unsupported scene schema `{}`", self.schema)));
        }
        if self.sources.is_empty() {
            return Err(Error::Precondition("scene has no sound sources".into()));
        }
        if self.sources.len() > MAX_SCENE_SOURCES {
            return Err(Error::Capacity {
                count: self.sources.len(),
                max: MAX_SCENE_SOURCES,
            });
        }
        for (i, s) in self.sources.iter().enumerate() {
            match s.modality {
                Modality::Visual | Modality::TextTranslated => {
                    let v = s.visual.as_ref().ok_or_else(|| {
                        Error::Input(format!("source {i}: visual/text source without a visual embedding"))
                    })?;
                    if v.0.len() != dims.visual {
                        return Err(Error::dim(format!("scene source {i} visual"), dims.visual, v.0.len()));
                    }
                }
                Modality::Audio => {
                    let a = s
                        .audio
                        .as_ref()
                        .ok_or_else(|| Error::Input(format!("source {i}: audio source without an audio embedding")))?;
                    if a.len() != dims.audio {
                        return Err(Error::dim(format!("scene source {i} audio"), dims.audio, a.len()));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Seeded generator helper shared across modules.
pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent stream seed from a base seed and a label.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    rng.set_stream(stream);
    rng.random()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small_world(sigma: f64) -> SyntheticWorld {
        SyntheticWorld::new(WorldConfig {
            num_classes: 4,
            dims: EmbeddingDims { visual: 8, audio: 6 },
            noise_sigma: sigma,
            seed: 7,
        })
        .unwrap()
    }

    #[test]
    fn zero_noise_pairs_equal_prototypes() {
        let w = small_world(0.0);
        let ds = synth_dataset(&w, 4, 0.5).unwrap();
        for p in &ds.pairs {
            let c = w.class_index(&p.class_label).unwrap();
            for (a, b) in p.visual.0.iter().zip(&w.prototypes_v[c]) {
                assert!((a - b).abs() < 1e-6);
            }
            for (a, b) in p.audio.values.iter().zip(&w.prototypes_a[c]) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = synth_dataset(&small_world(0.1), 6, 0.3).unwrap();
        let b = synth_dataset(&small_world(0.1), 6, 0.3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn every_split_contains_every_class() {
        let w = small_world(0.1);
        for ppc in 2..6 {
            let ds = synth_dataset(&w, ppc, 0.0).unwrap();
            for split in [Split::Train, Split::Test] {
                let mut seen: Vec<_> = ds.split(split).iter().map(|p| p.class_label.clone()).collect();
                seen.dedup();
                assert_eq!(seen.len(), 4, "ppc={ppc} split={split:?}");
            }
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = small_world(0.1).config;
        cfg.num_classes = 1;
        assert!(matches!(SyntheticWorld::new(cfg), Err(Error::Config(_))));
        assert!(synth_dataset(&small_world(0.1), 1, 0.0).is_err());
    }

    #[test]
    fn noisy_fraction_marks_curated_train_pairs() {
        let ds = synth_dataset(&small_world(0.1), 8, 0.5).unwrap();
        let curated = ds.pairs.iter().filter(|p| p.provenance == Provenance::Curated).count();
        // 6 train pairs per class, half of them curated.
        assert_eq!(curated, 4 * 3);
        assert!(ds.split(Split::Test).iter().all(|p| p.provenance == Provenance::Clean));
    }

    #[test]
    fn desk_world_nearest_prototype_is_exact() {
        let w = SyntheticWorld::new(WorldConfig::desk(EmbeddingDims { visual: 64, audio: 48 }, 3)).unwrap();
        let ds = synth_dataset(&w, 40, 0.0).unwrap();
        for p in &ds.pairs {
            let c = w.class_index(&p.class_label).unwrap();
            assert_eq!(w.nearest_visual_class(&p.visual.0).unwrap(), c);
        }
    }

    #[test]
    fn cosine_cases() {
        assert!((cosine_sim(&[3.0, 4.0], &[3.0, 4.0]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine_sim(&[1.0, 0.0], &[1.0, 1.0]).unwrap() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!(matches!(cosine_sim(&[0.0, 0.0], &[1.0, 1.0]), Err(Error::Domain(_))));
    }

    #[test]
    fn empty_manifest_is_empty_dataset() {
        let ds = read_manifest("".as_bytes(), None).unwrap();
        assert!(ds.is_empty());
    }

    #[test]
    fn wrong_width_names_the_line() {
        let w = SyntheticWorld::new(WorldConfig {
            num_classes: 2,
            dims: EmbeddingDims::CLIP_CLAP,
            noise_sigma: 0.1,
            seed: 1,
        })
        .unwrap();
        let mut ds = synth_dataset(&w, 2, 0.0).unwrap();
        ds.pairs[2].visual.0.pop();
        let mut buf = Vec::new();
        write_manifest(&ds, &mut buf).unwrap();
        let err = read_manifest(buf.as_slice(), Some(EmbeddingDims::CLIP_CLAP)).unwrap_err();
        match err {
            Error::Schema { line, message } => {
                assert_eq!(line, 3);
                assert!(message.contains("767"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_line_is_a_parse_error() {
        let err = read_manifest("\n{not json}\n".as_bytes(), None).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }

    #[test]
    fn broken_unit_norm_flag_is_rejected() {
        let line = r#"{"id":"x","class":"a","split":"train","provenance":"clean","visual":[1.0],"audio":[0.5,0.5],"audio_unit_norm":true}"#;
        assert!(matches!(read_manifest(line.as_bytes(), None), Err(Error::Schema { line: 1, .. })));
    }

    #[test]
    fn ten_pair_round_trip() {
        let ds = synth_dataset(&small_world(0.2), 5, 0.4).unwrap();
        assert_eq!(ds.len(), 20);
        let ten = SourcePairDataset::new(ds.pairs[..10].to_vec());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        save_manifest(&ten, &path).unwrap();
        assert_eq!(load_manifest(&path, None).unwrap(), ten);
    }

    #[test]
    fn scene_validation() {
        let dims = EmbeddingDims { visual: 2, audio: 3 };
        assert!(matches!(SceneManifest::new(vec![]).validate(dims), Err(Error::Precondition(_))));
        let many = SceneManifest::new(vec![SceneSource::visual(vec![1.0, 0.0]); 64]);
        assert!(matches!(many.validate(dims), Err(Error::Capacity { count: 64, max: 63 })));
        let ok = SceneManifest::new(vec![SceneSource::visual(vec![1.0, 0.0]), SceneSource::audio(vec![0.0, 1.0, 0.0])]);
        ok.validate(dims).unwrap();
        let bad = SceneManifest::new(vec![SceneSource {
            modality: Modality::TextTranslated,
            visual: None,
            audio: None,
        }]);
        assert!(bad.validate(dims).is_err());
    }

    proptest! {
        #[test]
        fn manifest_round_trip_is_lossless(values in proptest::collection::vec(-1e3f32..1e3f32, 6), id in "[a-z0-9]{1,8}") {
            let pair = SourcePair {
                id,
                class_label: "k".into(),
                visual: VisualEmbedding(values[..3].to_vec()),
                audio: AudioEmbedding::new(values[3..].to_vec()),
                provenance: Provenance::Translated,
                split: Split::Test,
            };
            let ds = SourcePairDataset::new(vec![pair]);
            let mut buf = Vec::new();
            write_manifest(&ds, &mut buf).unwrap();
            prop_assert_eq!(read_manifest(buf.as_slice(), None).unwrap(), ds);
        }
    }
}
