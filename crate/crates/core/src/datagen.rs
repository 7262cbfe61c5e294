//! Synthetic source tasks and shifted target streams.
//!
//! A task has `K` classes whose means are orthogonal `±1` channel sign
//! patterns that alternate along `L`, spaced `separation` apart in the full
//! `C·L` input space. Samples add i.i.d. Gaussian noise of
//! standard deviation `sigma_src` per element.
//!
//! Target domains apply a [`Corruption`] to clean samples:
//! `x' = a·x + b + N(0, σ²)`, then an optional fixed channel permutation.
//! Labels are untouched. All randomness is keyed on the global sample index,
//! so corrupting and batching commute and streams replay bit-for-bit.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numerics::Tensor;

/// Source task description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSpec {
    pub classes: usize,
    pub channels: usize,
    pub length: usize,
    /// Euclidean distance between any two class means.
    pub separation: f64,
    pub sigma_src: f64,
    /// Seeds a per-channel sign flip shared by all class means.
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self { classes: 3, channels: 16, length: 8, separation: 6.0, sigma_src: 0.5, seed: 1 }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Domain("need at least two classes".into()));
        }
        if self.channels == 0 || self.length == 0 {
            return Err(Error::Domain("channels and length must be positive".into()));
        }
        if self.classes > self.channels {
            return Err(Error::Domain(format!(
                "{} classes need at least as many channels (got {})",
                self.classes, self.channels
            )));
        }
        if !(self.sigma_src >= 0.0) || !(self.separation >= 0.0) {
            return Err(Error::Domain("separation and sigma_src must be >= 0".into()));
        }
        Ok(())
    }

    /// Per-class `C×L` mean patterns.
    pub fn class_means(&self) -> Result<Vec<Tensor>> {
        self.validate()?;
        let (c, l) = (self.channels, self.length);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let flips: Vec<f64> = (0..c).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
        // Walsh sign rows (orthogonal when C is a power of two) alternating
        // in sign along L. Every class then has the same per-channel mean and
        // variance over L, so a sample's channel statistics carry the domain
        // but not the class.
        let scale = self.separation / (2.0 * (l * c) as f64).sqrt();
        Ok((0..self.classes)
            .map(|k| {
                Tensor::from_fn(&[c, l], |i| {
                    let (ch, p) = (i / l, i % l);
                    let walsh = if (ch & k).count_ones() % 2 == 0 { 1.0 } else { -1.0 };
                    let along = if p % 2 == 0 { 1.0 } else { -1.0 };
                    scale * flips[ch] * walsh * along
                })
            })
            .collect())
    }
}

/// Covariate shift applied to clean samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Corruption {
    pub scale: f64,
    pub offset: f64,
    pub noise: f64,
    pub permute: bool,
    /// Seeds the channel permutation and the additive noise.
    pub seed: u64,
}

impl Default for Corruption {
    fn default() -> Self {
        Self::identity()
    }
}

/// Names accepted by [`Corruption::preset`].
pub const PRESETS: &[&str] = &["identity", "mild-scale", "strong-scale", "offset", "noise", "permute", "strong"];

impl Corruption {
    pub fn identity() -> Self {
        Self { scale: 1.0, offset: 0.0, noise: 0.0, permute: false, seed: 0 }
    }

    pub fn preset(name: &str) -> Result<Self> {
        let base = Self::identity();
        Ok(match name {
            "identity" => base,
            "mild-scale" => Self { scale: 1.5, offset: 0.2, ..base },
            "strong-scale" => Self { scale: 2.5, offset: 0.5, ..base },
            "offset" => Self { offset: 1.5, ..base },
            "noise" => Self { noise: 0.8, ..base },
            "permute" => Self { permute: true, seed: 17, ..base },
            "strong" => Self { scale: 2.0, offset: 1.0, noise: 1.2, seed: 23, ..base },
            other => {
                return Err(Error::Usage(format!(
                    "unknown corruption preset `{other}` (known: {})",
                    PRESETS.join(", ")
                )))
            }
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !self.scale.is_finite() || !self.offset.is_finite() || !(self.noise >= 0.0) || !self.noise.is_finite() {
            return Err(Error::Domain(format!("invalid corruption {self:?}")));
        }
        Ok(())
    }

    fn permutation(&self, channels: usize) -> Option<Vec<usize>> {
        self.permute.then(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5045_524d);
            let mut p: Vec<usize> = (0..channels).collect();
            p.shuffle(&mut rng);
            p
        })
    }

    /// Corrupts the rows of an `N×C×L` tensor; row `i` draws its noise from
    /// stream `first_index + i`.
    pub fn apply(&self, x: &Tensor, first_index: u64) -> Result<Tensor> {
        self.apply_seeded(x, first_index, self.seed)
    }

    /// [`Corruption::apply`] with the additive noise drawn from `noise_seed`
    /// instead of the corruption's own seed.
    pub fn apply_seeded(&self, x: &Tensor, first_index: u64, noise_seed: u64) -> Result<Tensor> {
        self.validate()?;
        let (n, c, l) = x.dims3()?;
        let perm = self.permutation(c);
        let mut out = vec![0.0; x.len()];
        for i in 0..n {
            let mut rng = ChaCha8Rng::seed_from_u64(noise_seed.wrapping_add(0x9E37_79B9_7F4A_7C15));
            rng.set_stream(first_index + i as u64);
            let row = &x.data()[i * c * l..(i + 1) * c * l];
            let dst = &mut out[i * c * l..(i + 1) * c * l];
            for ch in 0..c {
                for p in 0..l {
                    let mut v = self.scale * row[ch * l + p] + self.offset;
                    if self.noise > 0.0 {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        v += self.noise * z;
                    }
                    let target = perm.as_ref().map_or(ch, |pm| pm[ch]);
                    dst[target * l + p] = v;
                }
            }
        }
        Tensor::new(x.shape().to_vec(), out)
    }
}

/// A task under one corruption.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub task: TaskSpec,
    pub corruption: Corruption,
}

/// Labeled samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `N×C×L`.
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

/// Draws `x = mean_y + N(0, sigma_src²)` for the given labels; sample `i`
/// uses noise stream `first_index + i`.
fn draw_clean(
    task: &TaskSpec,
    means: &[Tensor],
    labels: &[usize],
    noise_seed: u64,
    first_index: u64,
) -> Result<Tensor> {
    let (c, l) = (task.channels, task.length);
    let mut data = Vec::with_capacity(labels.len() * c * l);
    for (i, &y) in labels.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        rng.set_stream(first_index + i as u64);
        for &m in means[y].data() {
            let z: f64 = StandardNormal.sample(&mut rng);
            data.push(m + task.sigma_src * z);
        }
    }
    Tensor::new(vec![labels.len(), c, l], data)
}

/// Class-balanced labeled source data.
pub fn sample_source(task: &TaskSpec, n: usize, seed: u64) -> Result<Dataset> {
    let means = task.class_means()?;
    if n < task.classes {
        return Err(Error::Domain(format!("need at least {} samples, got {n}", task.classes)));
    }
    let mut labels: Vec<usize> = (0..n).map(|i| i % task.classes).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    labels.shuffle(&mut rng);
    let inputs = draw_clean(task, &means, &labels, seed.wrapping_add(1), 0)?;
    Ok(Dataset { inputs, labels })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ordering {
    /// Labels drawn uniformly and independently.
    #[default]
    Iid,
    /// Each segment's labels sorted into same-class runs.
    ClassCorrelated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub corruption: Corruption,
    pub batches: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamSpec {
    pub task: TaskSpec,
    pub segments: Vec<Segment>,
    pub batch_size: usize,
    pub seed: u64,
    pub ordering: Ordering,
}

impl StreamSpec {
    /// One segment under `corruption`.
    pub fn single(task: TaskSpec, corruption: Corruption, batches: usize, batch_size: usize, seed: u64) -> Self {
        Self { task, segments: vec![Segment { corruption, batches }], batch_size, seed, ordering: Ordering::Iid }
    }

    pub fn total_batches(&self) -> usize {
        self.segments.iter().map(|s| s.batches).sum()
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Domain("batch size must be positive".into()));
        }
        for s in &self.segments {
            s.corruption.validate()?;
        }
        Ok(())
    }
}

/// One stream batch with evaluation labels and its segment tag.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `B×C×L`.
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub segment: usize,
    pub index: usize,
}

/// Lazily generated batches of a [`StreamSpec`].
pub struct Stream {
    spec: StreamSpec,
    means: Vec<Tensor>,
    segment: usize,
    within: usize,
    index: usize,
    segment_labels: Vec<usize>,
    first_sample: u64,
}

pub fn make_stream(spec: &StreamSpec) -> Result<Stream> {
    spec.validate()?;
    let means = spec.task.class_means()?;
    let mut s = Stream {
        spec: spec.clone(),
        means,
        segment: 0,
        within: 0,
        index: 0,
        segment_labels: Vec::new(),
        first_sample: 0,
    };
    s.prepare_segment();
    Ok(s)
}

impl Stream {
    pub fn spec(&self) -> &StreamSpec {
        &self.spec
    }

    fn prepare_segment(&mut self) {
        let Some(seg) = self.spec.segments.get(self.segment) else { return };
        let n = seg.batches * self.spec.batch_size;
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed);
        rng.set_stream(self.segment as u64);
        let k = self.spec.task.classes;
        self.segment_labels = (0..n).map(|_| rng.random_range(0..k)).collect();
        if self.spec.ordering == Ordering::ClassCorrelated {
            self.segment_labels.sort_unstable();
        }
    }

    fn build(&self) -> Result<Batch> {
        let seg = &self.spec.segments[self.segment];
        let b = self.spec.batch_size;
        let labels = self.segment_labels[self.within * b..(self.within + 1) * b].to_vec();
        let noise_seed = self.spec.seed.wrapping_mul(0x2545_F491_4F6C_DD1D).wrapping_add(7);
        let clean = draw_clean(&self.spec.task, &self.means, &labels, noise_seed, self.first_sample)?;
        // The permutation belongs to the domain; the additive noise also
        // varies with the stream seed.
        let noise_seed = seg.corruption.seed ^ self.spec.seed.rotate_left(17);
        let inputs = seg.corruption.apply_seeded(&clean, self.first_sample, noise_seed)?;
        Ok(Batch { inputs, labels, segment: self.segment, index: self.index })
    }
}

impl Iterator for Stream {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        while let Some(seg) = self.spec.segments.get(self.segment) {
            if self.within < seg.batches {
                let batch = self.build().expect("validated stream");
                self.within += 1;
                self.index += 1;
                self.first_sample += self.spec.batch_size as u64;
                return Some(batch);
            }
            self.segment += 1;
            self.within = 0;
            self.prepare_segment();
        }
        None
    }
}

/// Samples of every batch concatenated; convenient for evaluation.
pub fn collect_stream(spec: &StreamSpec) -> Result<Dataset> {
    let batches: Vec<Batch> = make_stream(spec)?.collect();
    if batches.is_empty() {
        return Err(shape_err!("stream has no batches"));
    }
    let inputs = Tensor::concat(&batches.iter().map(|b| b.inputs.clone()).collect::<Vec<_>>())?;
    let labels = batches.into_iter().flat_map(|b| b.labels).collect();
    Ok(Dataset { inputs, labels })
}
