//! Procedural labeled task streams.
//!
//! Three generator families with decreasing cross-task structure sharing:
//! `mixture2d` interleaves every task's Gaussian classes on one shared ring,
//! `rings` gives each task its own radius but a shared arc layout, and
//! `glyphs8` draws independent 8x8 stroke templates per class (64-D). Label
//! sets are globally disjoint across tasks. Samples are generated on demand;
//! a stream is fully determined by (kind, K, classes_per_task, seed).
//!
//! All outputs are normalized with a shift/scale frozen at construction from
//! a calibration draw, so model-facing data is roughly zero-mean, unit-RMS.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::str::FromStr;

pub const MIXTURE_RING_RADIUS: f64 = 2.0;
const MIXTURE_RADIAL_STD: f64 = 0.12;
const MIXTURE_TANGENT_STD: f64 = 0.35;
const RING_BASE_RADIUS: f64 = 1.0;
const RING_RADIUS_STEP: f64 = 0.6;
const RING_RADIAL_STD: f64 = 0.05;
/// Fraction of each angular sector a ring-arc class actually occupies.
const RING_ARC_FILL: f64 = 0.8;
const GLYPH_SIDE: usize = 8;
const GLYPH_DIM: usize = GLYPH_SIDE * GLYPH_SIDE;
const GLYPH_STROKES: usize = 3;
const GLYPH_FLIP_P: f64 = 0.05;
const GLYPH_JITTER_STD: f64 = 0.15;
const CALIBRATION_PER_CLASS: usize = 256;

// rng stream ids (ChaCha streams under the one stream seed)
const STREAM_GLYPH_TEMPLATES: u64 = 5;
const STREAM_CALIBRATION: u64 = 99;
const STREAM_SPLIT_BASE: u64 = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StreamKind {
    Mixture2d,
    Rings,
    Glyphs8,
}

impl FromStr for StreamKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mixture2d" => Ok(StreamKind::Mixture2d),
            "rings" => Ok(StreamKind::Rings),
            "glyphs8" => Ok(StreamKind::Glyphs8),
            other => Err(Error::invalid(format!("unknown stream kind {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, Serialize)]
pub struct TaskSpec {
    pub task_id: usize,
    /// Global class indices owned by this task (disjoint across tasks).
    pub labels: Vec<usize>,
    pub train_count: usize,
    pub test_count: usize,
}

#[derive(Clone)]
pub struct TaskStream {
    kind: StreamKind,
    seed: u64,
    tasks: Vec<TaskSpec>,
    classes_per_task: usize,
    label_count: usize,
    dim: usize,
    shift: Vec<f64>,
    scale: f64,
    /// Per-class +-1 pixel templates; only populated for glyphs8.
    glyph_templates: Vec<Vec<f64>>,
}

pub fn make_stream(
    kind: StreamKind,
    task_count: usize,
    classes_per_task: usize,
    seed: u64,
) -> Result<TaskStream> {
    if task_count == 0 || classes_per_task == 0 {
        return Err(Error::invalid("stream needs task_count >= 1 and classes_per_task >= 1"));
    }
    if task_count > 128 || classes_per_task > 128 {
        return Err(Error::invalid("stream dimensions out of range (<= 128 each)"));
    }
    let label_count = task_count * classes_per_task;
    let dim = match kind {
        StreamKind::Mixture2d | StreamKind::Rings => 2,
        StreamKind::Glyphs8 => GLYPH_DIM,
    };
    let tasks = (0..task_count)
        .map(|k| TaskSpec {
            task_id: k,
            labels: (k * classes_per_task..(k + 1) * classes_per_task).collect(),
            train_count: 4096,
            test_count: 1024,
        })
        .collect();

    let glyph_templates = if kind == StreamKind::Glyphs8 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(STREAM_GLYPH_TEMPLATES);
        (0..label_count).map(|_| glyph_template(&mut rng)).collect()
    } else {
        Vec::new()
    };

    let mut stream = TaskStream {
        kind,
        seed,
        tasks,
        classes_per_task,
        label_count,
        dim,
        shift: vec![0.0; dim],
        scale: 1.0,
        glyph_templates,
    };

    // freeze normalization from a class-balanced calibration draw
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(STREAM_CALIBRATION);
    let n_cal = CALIBRATION_PER_CLASS * label_count;
    let mut cal = Vec::with_capacity(n_cal * dim);
    for c in 0..label_count {
        for _ in 0..CALIBRATION_PER_CLASS {
            cal.extend_from_slice(&stream.raw_sample(c, &mut rng));
        }
    }
    let mut shift = vec![0.0; dim];
    for row in cal.chunks_exact(dim) {
        for (s, v) in shift.iter_mut().zip(row) {
            *s += v;
        }
    }
    for s in shift.iter_mut() {
        *s /= n_cal as f64;
    }
    let mut sq = 0.0;
    for row in cal.chunks_exact(dim) {
        for (s, v) in shift.iter().zip(row) {
            sq += (v - s) * (v - s);
        }
    }
    stream.scale = (sq / (n_cal * dim) as f64).sqrt().max(1e-12);
    stream.shift = shift;
    Ok(stream)
}

/// One +-1 template built from random straight strokes on the 8x8 grid.
fn glyph_template(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut cells = vec![-1.0; GLYPH_DIM];
    for _ in 0..GLYPH_STROKES {
        let len = rng.gen_range(3..=GLYPH_SIDE);
        let orient = rng.gen_range(0..4usize);
        let (dr, dc): (isize, isize) = match orient {
            0 => (0, 1),
            1 => (1, 0),
            2 => (1, 1),
            _ => (1, -1),
        };
        let span_r = (dr.unsigned_abs()) * (len - 1);
        let span_c = (dc.unsigned_abs()) * (len - 1);
        let r0 = rng.gen_range(0..GLYPH_SIDE - span_r) as isize;
        let c0 = if dc < 0 {
            rng.gen_range(span_c..GLYPH_SIDE) as isize
        } else {
            rng.gen_range(0..GLYPH_SIDE - span_c) as isize
        };
        for i in 0..len as isize {
            let (r, c) = (r0 + dr * i, c0 + dc * i);
            cells[r as usize * GLYPH_SIDE + c as usize] = 1.0;
        }
    }
    cells
}

impl TaskStream {
    pub fn kind(&self) -> StreamKind {
        self.kind
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn label_count(&self) -> usize {
        self.label_count
    }

    pub fn task_count(&self) -> usize {
        self.tasks.len()
    }

    pub fn tasks(&self) -> &[TaskSpec] {
        &self.tasks
    }

    /// Frozen normalization applied to every emitted sample: (x - shift) / scale.
    pub fn normalization(&self) -> (&[f64], f64) {
        (&self.shift, self.scale)
    }

    /// Angle slot on the shared mixture2d ring. Tasks interleave so every
    /// task's classes spread around the whole ring.
    fn angle_index(&self, class: usize) -> usize {
        let k = class / self.classes_per_task;
        let j = class % self.classes_per_task;
        j * self.tasks.len() + k
    }

    /// Exact (pre-normalization) mean of one class distribution.
    pub fn class_mean_raw(&self, class: usize) -> Result<Vec<f64>> {
        if class >= self.label_count {
            return Err(Error::invalid(format!("class {class} out of range")));
        }
        Ok(match self.kind {
            StreamKind::Mixture2d => {
                let a = std::f64::consts::TAU * self.angle_index(class) as f64
                    / self.label_count as f64;
                vec![MIXTURE_RING_RADIUS * a.cos(), MIXTURE_RING_RADIUS * a.sin()]
            }
            StreamKind::Rings => {
                let (k, j) = (class / self.classes_per_task, class % self.classes_per_task);
                let radius = RING_BASE_RADIUS + RING_RADIUS_STEP * k as f64;
                let phi = std::f64::consts::TAU * j as f64 / self.classes_per_task as f64;
                let half_w =
                    std::f64::consts::PI * RING_ARC_FILL / self.classes_per_task as f64;
                // E[(cos t, sin t)] over t ~ U(phi - w/2, phi + w/2)
                let sinc = half_w.sin() / half_w;
                vec![radius * sinc * phi.cos(), radius * sinc * phi.sin()]
            }
            StreamKind::Glyphs8 => self.glyph_templates[class]
                .iter()
                .map(|t| (1.0 - 2.0 * GLYPH_FLIP_P) * t)
                .collect(),
        })
    }

    fn raw_sample(&self, class: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        match self.kind {
            StreamKind::Mixture2d => {
                let a = std::f64::consts::TAU * self.angle_index(class) as f64
                    / self.label_count as f64;
                let (er, et) = ((a.cos(), a.sin()), (-a.sin(), a.cos()));
                let u: f64 = rng.sample(StandardNormal);
                let v: f64 = rng.sample(StandardNormal);
                let (rr, tt) = (MIXTURE_RADIAL_STD * u, MIXTURE_TANGENT_STD * v);
                vec![
                    MIXTURE_RING_RADIUS * er.0 + rr * er.0 + tt * et.0,
                    MIXTURE_RING_RADIUS * er.1 + rr * er.1 + tt * et.1,
                ]
            }
            StreamKind::Rings => {
                let (k, j) = (class / self.classes_per_task, class % self.classes_per_task);
                let base = RING_BASE_RADIUS + RING_RADIUS_STEP * k as f64;
                let phi = std::f64::consts::TAU * j as f64 / self.classes_per_task as f64;
                let half_w =
                    std::f64::consts::PI * RING_ARC_FILL / self.classes_per_task as f64;
                let theta = phi + rng.gen_range(-half_w..=half_w);
                let u: f64 = rng.sample(StandardNormal);
                let r = base + RING_RADIAL_STD * u;
                vec![r * theta.cos(), r * theta.sin()]
            }
            StreamKind::Glyphs8 => self.glyph_templates[class]
                .iter()
                .map(|t| {
                    let flip = if rng.gen::<f64>() < GLYPH_FLIP_P { -1.0 } else { 1.0 };
                    let jitter: f64 = rng.sample(StandardNormal);
                    flip * t + GLYPH_JITTER_STD * jitter
                })
                .collect(),
        }
    }

    /// Reproducible rng for one (task, split, round) cell. Train and test use
    /// disjoint ChaCha streams; `round` varies the seed bijectively so every
    /// round is a fresh i.i.d. draw.
    pub fn split_rng(&self, task: usize, split: Split, round: u64) -> ChaCha8Rng {
        let mut rng =
            ChaCha8Rng::seed_from_u64(self.seed ^ round.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let bit = match split {
            Split::Train => 0,
            Split::Test => 1,
        };
        rng.set_stream(STREAM_SPLIT_BASE + 2 * task as u64 + bit);
        rng
    }

    /// Draw `n` labeled samples from one task's class mixture (uniform over
    /// its labels), normalized. Deterministic in (stream, task, split, round).
    pub fn sample_task(
        &self,
        task: usize,
        split: Split,
        n: usize,
        round: u64,
    ) -> Result<(Tensor, Vec<usize>)> {
        if task >= self.tasks.len() {
            return Err(Error::invalid(format!("task {task} out of range")));
        }
        if n == 0 {
            return Err(Error::invalid("sample_task needs n >= 1"));
        }
        let mut rng = self.split_rng(task, split, round);
        let spec = &self.tasks[task];
        let mut data = Vec::with_capacity(n * self.dim);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let label = spec.labels[rng.gen_range(0..spec.labels.len())];
            let raw = self.raw_sample(label, &mut rng);
            for (v, s) in raw.iter().zip(&self.shift) {
                data.push((v - s) / self.scale);
            }
            labels.push(label);
        }
        Ok((Tensor::matrix(n, self.dim, data)?, labels))
    }

    /// Materialize the stream as `x0,...,x{d-1},label,task` rows (train split).
    pub fn to_csv(&self, per_task: usize) -> Result<String> {
        if per_task == 0 {
            return Err(Error::invalid("to_csv needs per_task >= 1"));
        }
        let mut out = String::new();
        for d in 0..self.dim {
            let _ = write!(out, "x{d},");
        }
        out.push_str("label,task\n");
        for k in 0..self.tasks.len() {
            let (x, labels) = self.sample_task(k, Split::Train, per_task, 0)?;
            for (r, &label) in labels.iter().enumerate() {
                for v in x.row(r) {
                    let _ = write!(out, "{v},");
                }
                let _ = writeln!(out, "{label},{k}");
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_gives_disjoint_contiguous_labels() {
        let s = make_stream(StreamKind::Mixture2d, 5, 2, 1).unwrap();
        assert_eq!(s.label_count(), 10);
        assert_eq!(s.dim(), 2);
        let mut all: Vec<usize> = s.tasks().iter().flat_map(|t| t.labels.clone()).collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        for t in s.tasks() {
            assert_eq!(t.labels.len(), 2);
        }
    }

    #[test]
    fn rejects_bad_construction_args() {
        assert!(make_stream(StreamKind::Rings, 0, 2, 1).is_err());
        assert!(make_stream(StreamKind::Rings, 2, 0, 1).is_err());
        assert!(make_stream(StreamKind::Rings, 500, 2, 1).is_err());
        assert!("nope".parse::<StreamKind>().is_err());
        assert_eq!("glyphs8".parse::<StreamKind>().unwrap(), StreamKind::Glyphs8);
    }

    #[test]
    fn same_seed_reproduces_stream_exactly() {
        for kind in [StreamKind::Mixture2d, StreamKind::Rings, StreamKind::Glyphs8] {
            let a = make_stream(kind, 3, 2, 42).unwrap().to_csv(16).unwrap();
            let b = make_stream(kind, 3, 2, 42).unwrap().to_csv(16).unwrap();
            let c = make_stream(kind, 3, 2, 43).unwrap().to_csv(16).unwrap();
            assert_eq!(a, b);
            assert_ne!(a, c);
        }
    }

    #[test]
    fn mixture_means_match_ring_chord_lengths() {
        // independent oracle: chord between ring slots i,j of L equally
        // spaced points on a radius-R circle is 2R sin(pi * dist / L)
        let s = make_stream(StreamKind::Mixture2d, 5, 2, 9).unwrap();
        let l = s.label_count();
        let means: Vec<Vec<f64>> = (0..l).map(|c| s.class_mean_raw(c).unwrap()).collect();
        for a in 0..l {
            for b in (a + 1)..l {
                let (ia, ib) = (s.angle_index(a), s.angle_index(b));
                let d = (ia as i64 - ib as i64).unsigned_abs() as usize;
                let slot_dist = d.min(l - d);
                let expect = 2.0
                    * MIXTURE_RING_RADIUS
                    * (std::f64::consts::PI * slot_dist as f64 / l as f64).sin();
                let got = ((means[a][0] - means[b][0]).powi(2)
                    + (means[a][1] - means[b][1]).powi(2))
                .sqrt();
                assert!((got - expect).abs() < 1e-9, "pair ({a},{b}): {got} vs {expect}");
            }
        }
    }

    #[test]
    fn tasks_interleave_on_the_shared_ring() {
        let s = make_stream(StreamKind::Mixture2d, 5, 2, 9).unwrap();
        // task 0 owns classes 0 and 1 -> slots 0 and 5: opposite sides
        assert_eq!(s.angle_index(0), 0);
        assert_eq!(s.angle_index(1), 5);
        assert_eq!(s.angle_index(2), 1); // task 1 sits right next to task 0
    }

    #[test]
    fn empirical_class_means_match_analytic_means() {
        for (kind, tol) in [
            (StreamKind::Mixture2d, 0.04),
            (StreamKind::Rings, 0.05),
            (StreamKind::Glyphs8, 0.06),
        ] {
            let s = make_stream(kind, 2, 2, 11).unwrap();
            let (x, labels) = s.sample_task(0, Split::Train, 6000, 1).unwrap();
            let (shift, scale) = s.normalization();
            for &c in &s.tasks()[0].labels {
                let rows: Vec<usize> =
                    (0..labels.len()).filter(|&i| labels[i] == c).collect();
                assert!(rows.len() > 2000);
                let mut mean = vec![0.0; s.dim()];
                for &r in &rows {
                    for (m, v) in mean.iter_mut().zip(x.row(r)) {
                        *m += v;
                    }
                }
                let expect = s.class_mean_raw(c).unwrap();
                for d in 0..s.dim() {
                    let un_norm = mean[d] / rows.len() as f64 * scale + shift[d];
                    assert!(
                        (un_norm - expect[d]).abs() < tol,
                        "{kind:?} class {c} dim {d}: {un_norm} vs {}",
                        expect[d]
                    );
                }
            }
        }
    }

    #[test]
    fn labels_stay_inside_task_and_frequencies_are_uniform() {
        let s = make_stream(StreamKind::Mixture2d, 3, 4, 5).unwrap();
        let n = 10_000;
        let (_, labels) = s.sample_task(1, Split::Train, n, 0).unwrap();
        let spec = &s.tasks()[1];
        let mut counts = vec![0usize; s.label_count()];
        for &l in &labels {
            assert!(spec.labels.contains(&l));
            counts[l] += 1;
        }
        let p = 1.0 / spec.labels.len() as f64;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for &l in &spec.labels {
            let dev = (counts[l] as f64 - n as f64 * p).abs();
            assert!(dev <= 3.0 * sigma, "class {l}: count {} off by {dev}", counts[l]);
        }
    }

    #[test]
    fn train_and_test_splits_differ_but_rounds_reproduce() {
        let s = make_stream(StreamKind::Rings, 2, 3, 8).unwrap();
        let (tr, _) = s.sample_task(0, Split::Train, 32, 0).unwrap();
        let (te, _) = s.sample_task(0, Split::Test, 32, 0).unwrap();
        assert_ne!(tr.data(), te.data());
        let (tr2, _) = s.sample_task(0, Split::Train, 32, 0).unwrap();
        assert_eq!(tr.data(), tr2.data());
        let (tr3, _) = s.sample_task(0, Split::Train, 32, 1).unwrap();
        assert_ne!(tr.data(), tr3.data());
    }

    #[test]
    fn normalized_stream_is_zero_mean_unit_rms() {
        for kind in [StreamKind::Mixture2d, StreamKind::Rings, StreamKind::Glyphs8] {
            let s = make_stream(kind, 3, 2, 21).unwrap();
            let mut sq = 0.0;
            let mut mean = vec![0.0; s.dim()];
            let mut n = 0usize;
            for k in 0..s.task_count() {
                let (x, _) = s.sample_task(k, Split::Test, 4000, 7).unwrap();
                for r in 0..4000 {
                    for (m, v) in mean.iter_mut().zip(x.row(r)) {
                        *m += v;
                        sq += v * v;
                    }
                }
                n += 4000;
            }
            let rms = (sq / (n * s.dim()) as f64).sqrt();
            assert!((rms - 1.0).abs() < 0.07, "{kind:?} rms {rms}");
            for m in &mean {
                assert!((m / n as f64).abs() < 0.08, "{kind:?} mean {}", m / n as f64);
            }
        }
    }

    #[test]
    fn glyph_samples_correlate_with_their_template() {
        let s = make_stream(StreamKind::Glyphs8, 2, 2, 3).unwrap();
        assert_eq!(s.dim(), 64);
        let (x, labels) = s.sample_task(0, Split::Train, 1000, 2).unwrap();
        let (shift, scale) = s.normalization();
        let t0: Vec<f64> = s.glyph_templates[0].clone();
        let t1: Vec<f64> = s.glyph_templates[1].clone();
        assert_ne!(t0, t1);
        let rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 0).collect();
        let mut dot0 = 0.0;
        let mut dot1 = 0.0;
        for &r in &rows {
            for (d, v) in x.row(r).iter().enumerate() {
                let raw = v * scale + shift[d];
                dot0 += raw * t0[d];
                dot1 += raw * t1[d];
            }
        }
        // mean alignment with own template is ~ 64 * (1 - 2p) per sample
        assert!(dot0 / rows.len() as f64 > 30.0);
        assert!(dot0 > dot1);
    }

    #[test]
    fn csv_export_shape_and_header() {
        let s = make_stream(StreamKind::Mixture2d, 2, 2, 4).unwrap();
        let csv = s.to_csv(5).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "x0,x1,label,task");
        assert_eq!(lines.len(), 1 + 2 * 5);
        assert!(lines[1].split(',').count() == 4);
        let last: Vec<&str> = lines[10].split(',').collect();
        assert_eq!(last[3], "1");
    }
}
