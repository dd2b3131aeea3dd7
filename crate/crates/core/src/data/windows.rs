use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::series::RawSeries;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Fixed-length labelled windows, stored flat as `[n × T × d_in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowSet {
    pub window_len: usize,
    pub feature_dim: usize,
    pub data: Vec<f64>,
    pub labels: Vec<u8>,
    /// Start row of each window in the source series.
    pub offsets: Vec<usize>,
}

impl WindowSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn stride(&self) -> usize {
        self.window_len * self.feature_dim
    }

    pub fn window(&self, i: usize) -> &[f64] {
        let s = self.stride();
        &self.data[i * s..(i + 1) * s]
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 1).count()
    }

    pub fn negatives(&self) -> usize {
        self.len() - self.positives()
    }

    /// Fraction of windows labelled anomalous.
    pub fn anomaly_ratio(&self) -> f64 {
        if self.is_empty() {
            0.0
        } else {
            self.positives() as f64 / self.len() as f64
        }
    }

    pub fn labels_f64(&self) -> Vec<f64> {
        self.labels.iter().map(|&l| l as f64).collect()
    }

    /// Windows at `indices`, in the given order.
    pub fn subset(&self, indices: &[usize]) -> WindowSet {
        let mut data = Vec::with_capacity(indices.len() * self.stride());
        for &i in indices {
            data.extend_from_slice(self.window(i));
        }
        WindowSet {
            window_len: self.window_len,
            feature_dim: self.feature_dim,
            data,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            offsets: indices.iter().map(|&i| self.offsets[i]).collect(),
        }
    }

    /// Stacks the selected windows into a `[B, T, d_in]` tensor.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(indices.len() * self.stride());
        for &i in indices {
            data.extend_from_slice(self.window(i));
        }
        Tensor::from_raw(vec![indices.len(), self.window_len, self.feature_dim], data)
    }

    /// Population standard deviation of each feature over all window cells.
    pub fn feature_std(&self) -> Vec<f64> {
        let d = self.feature_dim;
        let n = (self.data.len() / d) as f64;
        let mut mean = vec![0.0; d];
        for (i, v) in self.data.iter().enumerate() {
            mean[i % d] += v;
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for (i, v) in self.data.iter().enumerate() {
            var[i % d] += (v - mean[i % d]).powi(2);
        }
        var.into_iter().map(|v| (v / n).sqrt()).collect()
    }

    /// Sorted, deduplicated source rows covered by any window.
    pub fn covered_rows(&self) -> Vec<usize> {
        let mut rows: Vec<usize> = self
            .offsets
            .iter()
            .flat_map(|&o| o..o + self.window_len)
            .collect();
        rows.sort_unstable();
        rows.dedup();
        rows
    }

    fn class_indices(&self, label: u8) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.labels[i] == label)
            .collect()
    }
}

/// Cuts `series` into windows of `window_len` rows every `stride` rows. A
/// window is anomalous when any covered step is.
pub fn slice_windows(series: &RawSeries, window_len: usize, stride: usize) -> Result<WindowSet> {
    if window_len == 0 || stride == 0 {
        return Err(Error::Config(
            "window length and stride must be positive".into(),
        ));
    }
    let n = series.len();
    if n < window_len {
        return Err(Error::Data(format!(
            "series has {n} rows, shorter than the window length {window_len}"
        )));
    }
    let d = series.feature_dim();
    let dense = series.dense()?;
    let count = (n - window_len) / stride + 1;
    let mut data = Vec::with_capacity(count * window_len * d);
    let mut labels = Vec::with_capacity(count);
    let mut offsets = Vec::with_capacity(count);
    for w in 0..count {
        let start = w * stride;
        data.extend_from_slice(&dense[start * d..(start + window_len) * d]);
        labels.push(
            series.labels[start..start + window_len]
                .iter()
                .copied()
                .max()
                .unwrap_or(0),
        );
        offsets.push(start);
    }
    Ok(WindowSet {
        window_len,
        feature_dim: d,
        data,
        labels,
        offsets,
    })
}

/// Number of items of a class placed in the first split: the rounded
/// proportional share, kept away from 0 and `n` so both splits see the class.
fn class_share(n: usize, ratio: f64) -> usize {
    ((n as f64 * ratio).round() as usize).clamp(1, n - 1)
}

/// Seeded stratified split into `(first, second)` with `ratio` of each
/// class in `first`. Windows keep their original order inside each split.
pub fn stratified_split(
    windows: &WindowSet,
    ratio: f64,
    seed: u64,
) -> Result<(WindowSet, WindowSet)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!(
            "split ratio {ratio} must lie in (0, 1)"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut first = Vec::new();
    let mut second = Vec::new();
    for label in [0u8, 1] {
        let mut idx = windows.class_indices(label);
        if idx.len() < 2 {
            return Err(Error::Split(format!(
                "class {label} has {} window(s); at least 2 are needed to split",
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        let k = class_share(idx.len(), ratio);
        first.extend_from_slice(&idx[..k]);
        second.extend_from_slice(&idx[k..]);
    }
    first.sort_unstable();
    second.sort_unstable();
    Ok((windows.subset(&first), windows.subset(&second)))
}

/// Train/test partition; see [`stratified_split`].
pub fn split_train_test(
    windows: &WindowSet,
    ratio: f64,
    seed: u64,
) -> Result<(WindowSet, WindowSet)> {
    stratified_split(windows, ratio, seed)
}

/// Adds i.i.d. Gaussian noise with per-feature standard deviation
/// `sigma · feature_std[c]`. Labels are untouched.
pub fn inject_noise(
    windows: &WindowSet,
    sigma: f64,
    feature_std: &[f64],
    seed: u64,
) -> Result<WindowSet> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::Config(format!(
            "noise sigma {sigma} must be finite and ≥ 0"
        )));
    }
    if feature_std.len() != windows.feature_dim {
        return Err(Error::shape(
            "inject_noise",
            &[feature_std.len()],
            &[windows.feature_dim],
        ));
    }
    let mut out = windows.clone();
    if sigma == 0.0 {
        return Ok(out);
    }
    let d = windows.feature_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (i, v) in out.data.iter_mut().enumerate() {
        let z: f64 = StandardNormal.sample(&mut rng);
        *v += z * sigma * feature_std[i % d];
    }
    Ok(out)
}

/// Subsamples one class so the positive share is as close as possible to
/// `target`. Never duplicates windows.
///
/// Lowering the ratio drops positives, raising it drops negatives; the
/// target must keep anomalies the minority class, i.e. lie in `(0, 0.5]`.
pub fn resample_anomaly_ratio(windows: &WindowSet, target: f64, seed: u64) -> Result<WindowSet> {
    if !(target > 0.0 && target <= 0.5) {
        return Err(Error::Contract(format!(
            "anomaly ratio {target} is not reachable by subsampling; use a value in (0, 0.5]"
        )));
    }
    let pos = windows.class_indices(1);
    let neg = windows.class_indices(0);
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Contract("resampling needs both classes".into()));
    }
    let (p, n) = (pos.len(), neg.len());
    let current = p as f64 / (p + n) as f64;
    // closest achievable ratio; ties favour keeping more windows
    let (keep_p, keep_n) = if target <= current {
        let k = (1..=p)
            .rev()
            .min_by(|&a, &b| {
                let ea = (a as f64 / (a + n) as f64 - target).abs();
                let eb = (b as f64 / (b + n) as f64 - target).abs();
                ea.partial_cmp(&eb).unwrap()
            })
            .unwrap();
        (k, n)
    } else {
        let k = (1..=n)
            .rev()
            .min_by(|&a, &b| {
                let ea = (p as f64 / (p + a) as f64 - target).abs();
                let eb = (p as f64 / (p + b) as f64 - target).abs();
                ea.partial_cmp(&eb).unwrap()
            })
            .unwrap();
        (p, k)
    };
    let achieved = keep_p as f64 / (keep_p + keep_n) as f64;
    if (achieved - target).abs() > 1.0 / (keep_p + keep_n) as f64 {
        return Err(Error::Contract(format!(
            "anomaly ratio {target} is unreachable from {p} positive and {n} negative windows"
        )));
    }
    if keep_p == p && keep_n == n {
        return Ok(windows.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut choose = |mut idx: Vec<usize>, k: usize| {
        idx.shuffle(&mut rng);
        idx.truncate(k);
        idx
    };
    let mut keep = choose(pos, keep_p);
    keep.extend(choose(neg, keep_n));
    keep.sort_unstable();
    Ok(windows.subset(&keep))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(labels: Vec<u8>) -> RawSeries {
        let n = labels.len();
        let values = (0..n * 2).map(|i| i as f64).collect();
        RawSeries::from_dense(vec!["a".into(), "b".into()], values, labels).unwrap()
    }

    fn labelled(pos: usize, neg: usize) -> WindowSet {
        let mut labels = vec![1u8; pos];
        labels.extend(vec![0u8; neg]);
        let n = labels.len();
        WindowSet {
            window_len: 1,
            feature_dim: 1,
            data: (0..n).map(|i| i as f64).collect(),
            labels,
            offsets: (0..n).collect(),
        }
    }

    #[test]
    fn window_counts() {
        assert_eq!(slice_windows(&series(vec![0; 60]), 60, 1).unwrap().len(), 1);
        assert_eq!(
            slice_windows(&series(vec![0; 100]), 60, 1).unwrap().len(),
            41
        );
        for (n, t, s) in [(100, 7, 3), (61, 60, 2), (500, 60, 7), (10, 1, 1)] {
            let w = slice_windows(&series(vec![0; n]), t, s).unwrap();
            assert_eq!(w.len(), (n - t) / s + 1);
        }
        assert!(matches!(
            slice_windows(&series(vec![0; 59]), 60, 1),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn any_anomalous_step_marks_window() {
        let mut labels = vec![0u8; 10];
        labels[6] = 1;
        let w = slice_windows(&series(labels), 4, 1).unwrap();
        assert_eq!(w.labels, vec![0, 0, 0, 1, 1, 1, 1]);
        assert_eq!(w.window(1), &[2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]);
    }

    #[test]
    fn stratified_split_arithmetic() {
        let w = labelled(10, 90);
        let (train, test) = split_train_test(&w, 0.8, 5).unwrap();
        assert_eq!((train.len(), train.positives()), (80, 8));
        assert_eq!((test.len(), test.positives()), (20, 2));
        let mut all: Vec<usize> = train.offsets.iter().chain(&test.offsets).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert_eq!(split_train_test(&w, 0.8, 5).unwrap(), (train, test));
        assert!(matches!(
            split_train_test(&labelled(1, 50), 0.8, 0),
            Err(Error::Split(_))
        ));
    }

    #[test]
    fn ratio_resampling() {
        let w = labelled(100, 900);
        let r = resample_anomaly_ratio(&w, 0.05, 1).unwrap();
        assert_eq!((r.positives(), r.negatives()), (47, 900));
        assert_eq!(resample_anomaly_ratio(&w, 0.1, 1).unwrap(), w);
        let up = resample_anomaly_ratio(&w, 0.2, 1).unwrap();
        assert_eq!((up.positives(), up.negatives()), (100, 400));
        assert!(resample_anomaly_ratio(&w, 0.6, 1).is_err());
        assert!(resample_anomaly_ratio(&w, 0.0, 1).is_err());
    }

    #[test]
    fn noise_statistics() {
        let n = 100_000;
        let w = WindowSet {
            window_len: 1,
            feature_dim: 1,
            data: vec![0.0; n],
            labels: vec![0; n],
            offsets: (0..n).collect(),
        };
        assert_eq!(inject_noise(&w, 0.0, &[2.0], 3).unwrap(), w);
        let noisy = inject_noise(&w, 0.25, &[2.0], 3).unwrap();
        let std = (noisy.data.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
        assert!((std / 0.5 - 1.0).abs() < 0.05);
        assert_eq!(noisy.labels, w.labels);
    }
}
