//! Test accuracy, confusion matrices, feature export, and k-means clustering
//! accuracy with Hungarian matching.

use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{LayerTag, Model};
use crate::rng::SeedStreams;
use crate::tensor::{gemm_new, Scalar, Tensor};

/// Rows are true classes, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn from_predictions(predicted: &[usize], truth: &[usize], classes: usize) -> Result<Self> {
        if predicted.len() != truth.len() {
            return Err(Error::InvalidArgument(format!(
                "{} predictions for {} labels",
                predicted.len(),
                truth.len()
            )));
        }
        let mut counts = vec![vec![0u64; classes]; classes];
        for (&p, &t) in predicted.iter().zip(truth) {
            if p >= classes || t >= classes {
                return Err(Error::InvalidArgument(format!(
                    "label {} outside 0..{classes}",
                    p.max(t)
                )));
            }
            counts[t][p] += 1;
        }
        Ok(Self { counts })
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes()).map(|i| self.counts[i][i]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            n => self.trace() as f64 / n as f64,
        }
    }

    /// `c` rows of `c` comma-separated counts, then `accuracy=<float>`.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for row in &self.counts {
            let cells: Vec<String> = row.iter().map(u64::to_string).collect();
            s.push_str(&cells.join(","));
            s.push('\n');
        }
        writeln!(s, "accuracy={}", self.accuracy()).unwrap();
        s
    }
}

/// Argmax accuracy of `model` on `dataset`, plus the confusion matrix.
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    dataset: &Dataset,
    batch_size: usize,
) -> Result<(f64, ConfusionMatrix)> {
    if dataset.classes != model.config().class_count {
        return Err(Error::InvalidArgument(format!(
            "dataset has {} classes, model predicts {}",
            dataset.classes,
            model.config().class_count
        )));
    }
    let preds = model.predict(&dataset.images, batch_size)?;
    let cm = ConfusionMatrix::from_predictions(&preds, &dataset.labels, dataset.classes)?;
    Ok((cm.accuracy(), cm))
}

/// Flattened per-sample activations of one layer.
#[derive(Debug, Clone)]
pub struct FeatureDump {
    pub layer: LayerTag,
    /// `[N, feature_dim]`.
    pub features: Tensor<f32>,
    pub labels: Vec<usize>,
}

impl FeatureDump {
    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    /// Header `label,f0,f1,...`, then one row per sample.
    pub fn to_csv(&self) -> String {
        let d = self.dim();
        let mut s = String::from("label");
        for i in 0..d {
            write!(s, ",f{i}").unwrap();
        }
        s.push('\n');
        for (row, label) in self.features.data().chunks(d).zip(&self.labels) {
            write!(s, "{label}").unwrap();
            for v in row {
                write!(s, ",{v}").unwrap();
            }
            s.push('\n');
        }
        s
    }
}

/// Post-pool activations for `P2`/`P5`, post-SELU for `DPL3`/`DPL6`.
pub fn extract_features<T: Scalar>(
    model: &Model<T>,
    dataset: &Dataset,
    layer: LayerTag,
    batch_size: usize,
) -> Result<FeatureDump> {
    let missing = matches!(layer, LayerTag::Dpl3) && model.dpl3.is_none()
        || matches!(layer, LayerTag::Dpl6) && model.dpl6.is_none();
    if missing {
        return Err(Error::UnknownLayer(format!(
            "{layer} (model has no DPL layers)"
        )));
    }
    let n = dataset.len();
    let mut data = Vec::new();
    let mut dim = 0;
    for start in (0..n).step_by(batch_size.max(1)) {
        let idx: Vec<usize> = (start..(start + batch_size.max(1)).min(n)).collect();
        let batch = dataset.batch::<T>(&idx)?;
        let cache = model.forward(&batch.images)?;
        let f = cache.features(layer).expect("layer presence checked above");
        dim = f.len() / idx.len();
        data.extend(f.data().iter().map(|&v| Scalar::to_f64(v) as f32));
    }
    Ok(FeatureDump {
        layer,
        features: Tensor::new(&[n, dim], data)?,
        labels: dataset.labels.clone(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub labels: Vec<usize>,
    /// Sum of squared distances to the assigned centroids.
    pub inertia: f64,
    pub iterations: usize,
}

pub const KMEANS_MAX_ITER: usize = 300;

/// Lloyd's algorithm on the rows of `x` (`[N, d]`). Centroids start at `k`
/// distinct samples drawn uniformly with `seed`; an emptied cluster is
/// re-seeded with the point farthest from its current centroid.
pub fn kmeans(x: &Tensor<f64>, k: usize, seed: u64, max_iter: usize) -> Result<KMeansResult> {
    let [n, d] = *x.shape() else {
        return Err(Error::InvalidArgument(format!(
            "kmeans expects a matrix, got shape {:?}",
            x.shape()
        )));
    };
    if k == 0 || n < k {
        return Err(Error::InvalidArgument(format!(
            "kmeans needs 1 <= k <= N, got k={k}, N={n}"
        )));
    }
    let mut rng = SeedStreams::new(seed).stream("kmeans");
    kmeans_with_rng(x, n, d, k, max_iter, &mut rng)
}

fn kmeans_with_rng(
    x: &Tensor<f64>,
    n: usize,
    d: usize,
    k: usize,
    max_iter: usize,
    rng: &mut impl Rng,
) -> Result<KMeansResult> {
    let rows = x.data();
    let row_sq: Vec<f64> = rows
        .chunks(d)
        .map(|r| r.iter().map(|v| v * v).sum())
        .collect();
    let mut centroids = Tensor::<f64>::zeros(&[k, d]);
    for (c, i) in sample(rng, n, k).into_iter().enumerate() {
        centroids.data_mut()[c * d..(c + 1) * d].copy_from_slice(&rows[i * d..(i + 1) * d]);
    }
    let mut labels = vec![usize::MAX; n];
    let mut dist = vec![0.0f64; n];
    let mut iterations = 0;
    loop {
        // Squared distances via ||x||^2 - 2 x.c + ||c||^2, clamped at zero.
        let cross = gemm_new(x, false, &centroids, true)?;
        let c_sq: Vec<f64> = centroids
            .data()
            .chunks(d)
            .map(|r| r.iter().map(|v| v * v).sum())
            .collect();
        let mut changed = false;
        for i in 0..n {
            let xc = &cross.data()[i * k..(i + 1) * k];
            let (mut best, mut best_d) = (0, f64::INFINITY);
            for c in 0..k {
                let dd = (row_sq[i] - 2.0 * xc[c] + c_sq[c]).max(0.0);
                if dd < best_d {
                    best = c;
                    best_d = dd;
                }
            }
            if labels[i] != best {
                labels[i] = best;
                changed = true;
            }
            dist[i] = best_d;
        }
        if !changed || iterations >= max_iter {
            break;
        }
        iterations += 1;

        let mut sums = vec![0.0f64; k * d];
        let mut counts = vec![0usize; k];
        for (i, &l) in labels.iter().enumerate() {
            counts[l] += 1;
            for (s, v) in sums[l * d..(l + 1) * d]
                .iter_mut()
                .zip(&rows[i * d..(i + 1) * d])
            {
                *s += v;
            }
        }
        let mut taken = vec![false; n];
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..n)
                    .filter(|&i| !taken[i])
                    .fold(None, |best: Option<usize>, i| match best {
                        Some(b) if dist[b] >= dist[i] => Some(b),
                        _ => Some(i),
                    })
                    .expect("N >= k leaves a free point");
                taken[far] = true;
                dist[far] = 0.0;
                sums[c * d..(c + 1) * d].copy_from_slice(&rows[far * d..(far + 1) * d]);
                counts[c] = 1;
            }
            let inv = 1.0 / counts[c] as f64;
            for v in &mut sums[c * d..(c + 1) * d] {
                *v *= inv;
            }
        }
        centroids = Tensor::new(&[k, d], sums)?;
    }
    // Exact inertia against the final centroids.
    let cent = centroids.data();
    let inertia = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            rows[i * d..(i + 1) * d]
                .iter()
                .zip(&cent[l * d..(l + 1) * d])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
        })
        .sum();
    Ok(KMeansResult {
        labels,
        inertia,
        iterations,
    })
}

/// Minimum-cost perfect assignment on a square cost matrix; returns the
/// column chosen for each row. Shortest augmenting paths with potentials, O(n^3).
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Vec<usize>> {
    let n = cost.len();
    if cost.iter().any(|r| r.len() != n) {
        return Err(Error::InvalidArgument(
            "hungarian needs a square cost matrix".into(),
        ));
    }
    // 1-based arrays; column 0 is a virtual source.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut j0 = 0;
        let mut min_to = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let reduced = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if reduced < min_to[j] {
                        min_to[j] = reduced;
                        way[j] = j0;
                    }
                    if min_to[j] < delta {
                        delta = min_to[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_to[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        while j0 != 0 {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        if owner[j] != 0 {
            assignment[owner[j] - 1] = j - 1;
        }
    }
    Ok(assignment)
}

/// `counts[cluster][class]` over labels in `0..k`.
pub fn contingency(predicted: &[usize], truth: &[usize], k: usize) -> Result<Vec<Vec<u64>>> {
    if predicted.len() != truth.len() {
        return Err(Error::InvalidArgument(format!(
            "{} cluster labels for {} class labels",
            predicted.len(),
            truth.len()
        )));
    }
    let mut table = vec![vec![0u64; k]; k];
    for (&p, &t) in predicted.iter().zip(truth) {
        if p >= k || t >= k {
            return Err(Error::InvalidArgument(format!(
                "label {} outside 0..{k}",
                p.max(t)
            )));
        }
        table[p][t] += 1;
    }
    Ok(table)
}

/// Accuracy under the best one-to-one mapping of a contingency table's rows to columns.
pub fn matched_accuracy(table: &[Vec<u64>]) -> Result<f64> {
    let total: u64 = table.iter().flatten().sum();
    if total == 0 {
        return Err(Error::InvalidArgument("empty contingency table".into()));
    }
    let cost: Vec<Vec<f64>> = table
        .iter()
        .map(|r| r.iter().map(|&c| -(c as f64)).collect())
        .collect();
    let assignment = hungarian(&cost)?;
    let matched: u64 = assignment
        .iter()
        .enumerate()
        .map(|(r, &c)| table[r][c])
        .sum();
    Ok(matched as f64 / total as f64)
}

/// Clustering accuracy: fraction of samples correct under the best bijection
/// between cluster ids and class ids (both in `0..k`).
pub fn clustering_ac(predicted: &[usize], truth: &[usize], k: usize) -> Result<f64> {
    matched_accuracy(&contingency(predicted, truth, k)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AcSummary {
    pub runs: Vec<f64>,
    pub mean: f64,
    pub max: f64,
}

/// Mean and max clustering accuracy over `runs` k-means restarts, restart `r`
/// seeded from the `kmeans/r` sub-stream of `seed`.
pub fn clustering_ac_restarts(
    dump: &FeatureDump,
    k: usize,
    runs: usize,
    seed: u64,
) -> Result<AcSummary> {
    if runs == 0 {
        return Err(Error::InvalidArgument("runs must be at least 1".into()));
    }
    let x: Tensor<f64> = dump.features.cast();
    let [n, d] = *x.shape() else { unreachable!() };
    if n < k {
        return Err(Error::InvalidArgument(format!(
            "kmeans needs N >= k, got N={n}, k={k}"
        )));
    }
    let streams = SeedStreams::new(seed);
    let mut acs = Vec::with_capacity(runs);
    for r in 0..runs {
        let mut rng = streams.stream(&format!("kmeans/{r}"));
        let km = kmeans_with_rng(&x, n, d, k, KMEANS_MAX_ITER, &mut rng)?;
        acs.push(clustering_ac(&km.labels, &dump.labels, k)?);
    }
    let mean = acs.iter().sum::<f64>() / runs as f64;
    let max = acs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(AcSummary {
        runs: acs,
        mean,
        max,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};
    use rand::seq::SliceRandom;
    use rand_distr::{Distribution, Normal};

    fn brute_force(table: &[Vec<u64>]) -> f64 {
        fn permute(
            k: usize,
            used: &mut Vec<bool>,
            row: usize,
            table: &[Vec<u64>],
            acc: u64,
            best: &mut u64,
        ) {
            if row == k {
                *best = (*best).max(acc);
                return;
            }
            for c in 0..k {
                if !used[c] {
                    used[c] = true;
                    permute(k, used, row + 1, table, acc + table[row][c], best);
                    used[c] = false;
                }
            }
        }
        let k = table.len();
        let mut best = 0;
        permute(k, &mut vec![false; k], 0, table, 0, &mut best);
        best as f64 / table.iter().flatten().sum::<u64>() as f64
    }

    #[test]
    fn contingency_example_gives_point_eight() {
        let table = vec![vec![5, 0], vec![2, 3]];
        assert_eq!(matched_accuracy(&table).unwrap(), 0.8);
        assert_eq!(brute_force(&table), 0.8);
    }

    #[test]
    fn ac_of_identical_and_permuted_labels() {
        let truth: Vec<usize> = (0..50).map(|i| i % 5).collect();
        assert_eq!(clustering_ac(&truth, &truth, 5).unwrap(), 1.0);
        let perm = [3, 0, 4, 1, 2];
        let pred: Vec<usize> = truth.iter().map(|&t| perm[t]).collect();
        assert_eq!(clustering_ac(&pred, &truth, 5).unwrap(), 1.0);
        assert!(clustering_ac(&pred[..3], &truth, 5).is_err());
    }

    #[test]
    fn hungarian_matches_brute_force_on_fixed_tables() {
        let mut rng = SeedStreams::new(3).stream("tables");
        for k in 1..=6 {
            for _ in 0..20 {
                let table: Vec<Vec<u64>> = (0..k)
                    .map(|_| (0..k).map(|_| rng.gen_range(0..20)).collect())
                    .collect();
                if table.iter().flatten().sum::<u64>() == 0 {
                    continue;
                }
                assert_eq!(matched_accuracy(&table).unwrap(), brute_force(&table));
            }
        }
    }

    proptest! {
        #[test]
        fn ac_is_invariant_under_relabeling(labels in proptest::collection::vec((0usize..4, 0usize..4), 1..60), seed in 0u64..1000) {
            let (pred, truth): (Vec<usize>, Vec<usize>) = labels.into_iter().unzip();
            let base = clustering_ac(&pred, &truth, 4).unwrap();
            let mut rng = SeedStreams::new(seed).stream("perm");
            let mut perm: Vec<usize> = (0..4).collect();
            perm.shuffle(&mut rng);
            let relabeled: Vec<usize> = pred.iter().map(|&p| perm[p]).collect();
            prop_assert_eq!(clustering_ac(&relabeled, &truth, 4).unwrap(), base);
            let retrue: Vec<usize> = truth.iter().map(|&t| perm[t]).collect();
            prop_assert_eq!(clustering_ac(&pred, &retrue, 4).unwrap(), base);
            prop_assert!((0.0..=1.0).contains(&base));
        }
    }

    #[test]
    fn kmeans_recovers_separated_blobs() {
        let mut rng = SeedStreams::new(1).stream("blobs");
        let noise = Normal::new(0.0, 1.0).unwrap();
        let (n, d) = (100, 3);
        let mut data = Vec::new();
        let mut truth = Vec::new();
        for i in 0..n {
            let centre = if i % 2 == 0 { 0.0 } else { 10.0 };
            truth.push(i % 2);
            for _ in 0..d {
                data.push(centre + noise.sample(&mut rng));
            }
        }
        let x = Tensor::new(&[n, d], data).unwrap();
        let km = kmeans(&x, 2, 9, KMEANS_MAX_ITER).unwrap();
        assert_eq!(clustering_ac(&km.labels, &truth, 2).unwrap(), 1.0);
        assert_eq!(kmeans(&x, 2, 9, KMEANS_MAX_ITER).unwrap(), km);
    }

    #[test]
    fn kmeans_with_k_equal_n_has_zero_inertia() {
        let x = Tensor::from_rows(&[&[0.0, 1.0], &[5.0, 5.0], &[-3.0, 2.0], &[9.0, -1.0]]).unwrap();
        let km = kmeans(&x, 4, 0, KMEANS_MAX_ITER).unwrap();
        assert_eq!(km.inertia, 0.0);
        let mut seen = km.labels.clone();
        seen.sort();
        assert_eq!(seen, vec![0, 1, 2, 3]);
        assert!(kmeans(&x, 5, 0, KMEANS_MAX_ITER).is_err());
    }

    #[test]
    fn kmeans_reseeds_empty_clusters() {
        // Duplicate points force identical initial centroids for some seeds.
        let x = Tensor::from_rows(&[&[0.0], &[0.0], &[0.0], &[10.0], &[20.0]]).unwrap();
        for seed in 0..20 {
            let km = kmeans(&x, 3, seed, KMEANS_MAX_ITER).unwrap();
            let mut used = km.labels.clone();
            used.sort();
            used.dedup();
            assert_eq!(used.len(), 3, "seed {seed}: {:?}", km.labels);
        }
    }

    #[test]
    fn confusion_matrix_accuracy_and_csv() {
        let truth = [0, 0, 1, 1, 2, 2];
        let cm = ConfusionMatrix::from_predictions(&truth, &truth, 3).unwrap();
        assert_eq!(cm.accuracy(), 1.0);
        assert_eq!(cm.counts()[1], vec![0, 2, 0]);
        let constant = ConfusionMatrix::from_predictions(&[0; 6], &truth, 3).unwrap();
        assert!((constant.accuracy() - 1.0 / 3.0).abs() < 1e-15);
        let rows: Vec<u64> = constant.counts().iter().map(|r| r.iter().sum()).collect();
        assert_eq!(rows, vec![2, 2, 2]);
        assert_eq!(
            constant.to_csv(),
            "2,0,0\n2,0,0\n2,0,0\naccuracy=0.3333333333333333\n"
        );
    }

    #[test]
    fn feature_csv_layout() {
        let dump = FeatureDump {
            layer: LayerTag::P5,
            features: Tensor::new(&[2, 2], vec![0.5, 1.0, -2.0, 0.0]).unwrap(),
            labels: vec![3, 7],
        };
        assert_eq!(dump.to_csv(), "label,f0,f1\n3,0.5,1\n7,-2,0\n");
    }
}
