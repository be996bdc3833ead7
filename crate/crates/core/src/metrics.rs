//! IoU / mIoU and the forgetting metrics computed over a run.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rows are ground truth, columns are predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: Array2<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            counts: Array2::zeros((num_classes, num_classes)),
        }
    }

    pub fn from_counts(counts: Array2<u64>) -> Result<Self> {
        if counts.nrows() != counts.ncols() {
            return Err(Error::Metric("confusion matrix must be square".into()));
        }
        Ok(ConfusionMatrix { counts })
    }

    pub fn num_classes(&self) -> usize {
        self.counts.nrows()
    }

    pub fn counts(&self) -> &Array2<u64> {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.sum()
    }

    pub fn accumulate(&mut self, gt: ArrayView2<'_, u8>, pred: ArrayView2<'_, u8>) -> Result<()> {
        if gt.dim() != pred.dim() {
            return Err(Error::shape(format!("ground truth {:?} vs prediction {:?}", gt.dim(), pred.dim())));
        }
        let n = self.num_classes();
        for (&g, &p) in gt.iter().zip(pred.iter()) {
            let (g, p) = (g as usize, p as usize);
            if g >= n || p >= n {
                return Err(Error::invalid(format!("class id out of range ({g}, {p}) for {n} classes")));
            }
            self.counts[[g, p]] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        self.counts += &other.counts;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IouScores {
    /// Percent; `None` for classes absent from both prediction and ground truth.
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
}

pub fn iou_scores(cm: &ConfusionMatrix) -> Result<IouScores> {
    if cm.total() == 0 {
        return Err(Error::Metric("empty confusion matrix".into()));
    }
    let n = cm.num_classes();
    let c = &cm.counts;
    let per_class: Vec<Option<f64>> = (0..n)
        .map(|k| {
            let tp = c[[k, k]];
            let fn_ = c.row(k).sum() - tp;
            let fp = c.column(k).sum() - tp;
            let union = tp + fp + fn_;
            (union > 0).then(|| 100.0 * tp as f64 / union as f64)
        })
        .collect();
    let valid: Vec<f64> = per_class.iter().flatten().copied().collect();
    let miou = valid.iter().sum::<f64>() / valid.len() as f64;
    Ok(IouScores { per_class, miou })
}

/// `miou[k][s]`: mIoU of target `k` evaluated after step `s` (both
/// zero-based), defined only for `s >= k`.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricMatrix {
    pub targets: Vec<String>,
    miou: Vec<Vec<Option<f64>>>,
    per_class: Vec<Vec<Option<Vec<Option<f64>>>>>,
}

#[derive(Serialize, Deserialize)]
struct MetricsJson {
    targets: Vec<String>,
    steps: Vec<usize>,
    miou: Vec<Vec<Option<f64>>>,
    per_class: BTreeMap<String, Vec<Option<Vec<Option<f64>>>>>,
    af: Option<f64>,
    miou_avg: Option<f64>,
}

impl MetricMatrix {
    pub fn new(targets: Vec<String>) -> Self {
        let k = targets.len();
        MetricMatrix {
            targets,
            miou: vec![vec![None; k]; k],
            per_class: vec![vec![None; k]; k],
        }
    }

    /// Builds a matrix from rows `miou[k]` listing the scores of target `k`
    /// at steps `k..K`.
    pub fn from_rows(targets: Vec<String>, rows: &[Vec<f64>]) -> Result<Self> {
        let mut m = MetricMatrix::new(targets);
        if rows.len() != m.len() {
            return Err(Error::Metric("one row per target required".into()));
        }
        for (k, row) in rows.iter().enumerate() {
            if row.len() != m.len() - k {
                return Err(Error::Metric(format!("row {k} needs {} entries", m.len() - k)));
            }
            for (i, &v) in row.iter().enumerate() {
                m.set(k, k + i, v, None)?;
            }
        }
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn set(&mut self, target: usize, step: usize, miou: f64, per_class: Option<Vec<Option<f64>>>) -> Result<()> {
        if target >= self.len() || step >= self.len() || step < target {
            return Err(Error::Metric(format!("no entry for target {target} at step {step}")));
        }
        self.miou[target][step] = Some(miou);
        self.per_class[target][step] = per_class;
        Ok(())
    }

    pub fn get(&self, target: usize, step: usize) -> Option<f64> {
        self.miou.get(target)?.get(step).copied().flatten()
    }

    pub fn per_class(&self, target: usize, step: usize) -> Option<&[Option<f64>]> {
        self.per_class.get(target)?.get(step)?.as_deref()
    }

    fn require(&self, target: usize, step: usize) -> Result<f64> {
        self.get(target, step)
            .ok_or_else(|| Error::Metric(format!("missing mIoU for target {target} at step {step}")))
    }

    pub fn is_complete(&self) -> bool {
        (0..self.len()).all(|k| (k..self.len()).all(|s| self.get(k, s).is_some()))
    }

    pub fn to_json_string(&self) -> Result<String> {
        let complete = self.is_complete() && !self.is_empty();
        let doc = MetricsJson {
            targets: self.targets.clone(),
            steps: (1..=self.len()).collect(),
            miou: self.miou.clone(),
            per_class: self
                .targets
                .iter()
                .cloned()
                .zip(self.per_class.iter().cloned())
                .collect(),
            af: if complete { Some(accumulated_forgetting(self)?) } else { None },
            miou_avg: if complete { Some(miou_average(self)?) } else { None },
        };
        Ok(serde_json::to_string_pretty(&doc)? + "\n")
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let doc: MetricsJson = serde_json::from_str(s)?;
        let k = doc.targets.len();
        if doc.miou.len() != k || doc.miou.iter().any(|r| r.len() != k) {
            return Err(Error::Metric("miou must be a K x K matrix".into()));
        }
        let mut m = MetricMatrix::new(doc.targets.clone());
        for (t, row) in doc.miou.iter().enumerate() {
            for (s, v) in row.iter().enumerate() {
                if let Some(v) = v {
                    let pc = doc.per_class.get(&doc.targets[t]).and_then(|r| r.get(s).cloned()).flatten();
                    m.set(t, s, *v, pc)?;
                }
            }
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        std::io::Write::write_all(&mut tmp, self.to_json_string()?.as_bytes())?;
        tmp.persist(path).map_err(|e| Error::Io(e.error))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }
}

/// Sum over all but the last target of (score right after learning it) minus
/// (score after the final step).
pub fn accumulated_forgetting(m: &MetricMatrix) -> Result<f64> {
    let k = m.len();
    if k == 0 {
        return Err(Error::Metric("no targets".into()));
    }
    let mut af = 0.0;
    for t in 0..k - 1 {
        af += m.require(t, t)? - m.require(t, k - 1)?;
    }
    Ok(af)
}

/// Mean final-step mIoU over all targets.
pub fn miou_average(m: &MetricMatrix) -> Result<f64> {
    let k = m.len();
    if k == 0 {
        return Err(Error::Metric("no targets".into()));
    }
    let mut sum = 0.0;
    for t in 0..k {
        sum += m.require(t, k - 1)?;
    }
    Ok(sum / k as f64)
}

/// Forgetting computed directly from per-target drops
/// `mIoU_{k,k} - mIoU_{k,K}`.
pub fn forgetting_from_drops(drops: &[f64]) -> f64 {
    drops.iter().sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tags(n: usize) -> Vec<String> {
        ["night", "rain", "fog", "snow"][..n].iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn hand_computed_iou() {
        let cm = ConfusionMatrix::from_counts(array![[50u64, 50], [0, 100]]).unwrap();
        let s = iou_scores(&cm).unwrap();
        assert!((s.per_class[0].unwrap() - 50.0).abs() < 1e-12);
        assert!((s.per_class[1].unwrap() - 200.0 / 3.0).abs() < 1e-12);
        assert!((s.miou - (50.0 + 200.0 / 3.0) / 2.0).abs() < 1e-12);
        assert_eq!(format!("{:.1}", s.miou), "58.3");
    }

    #[test]
    fn perfect_and_absent_classes() {
        let cm = ConfusionMatrix::from_counts(array![[10u64, 0, 0], [0, 0, 0], [0, 0, 5]]).unwrap();
        let s = iou_scores(&cm).unwrap();
        assert_eq!(s.per_class, vec![Some(100.0), None, Some(100.0)]);
        assert_eq!(s.miou, 100.0);
        assert!(iou_scores(&ConfusionMatrix::new(3)).is_err());
    }

    #[test]
    fn iou_matches_set_intersection_bruteforce() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let gt = Array2::from_shape_fn((16, 16), |_| rng.random_range(0..4u8));
            let pred = Array2::from_shape_fn((16, 16), |_| rng.random_range(0..4u8));
            let mut cm = ConfusionMatrix::new(5);
            cm.accumulate(gt.view(), pred.view()).unwrap();
            let s = iou_scores(&cm).unwrap();
            for c in 0..5u8 {
                let inter = gt.iter().zip(pred.iter()).filter(|(&g, &p)| g == c && p == c).count();
                let union = gt.iter().zip(pred.iter()).filter(|(&g, &p)| g == c || p == c).count();
                let expect = (union > 0).then(|| 100.0 * inter as f64 / union as f64);
                assert_eq!(s.per_class[c as usize], expect);
            }
        }
    }

    #[test]
    fn accumulation_is_order_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pairs: Vec<_> = (0..6)
            .map(|_| {
                (
                    Array2::from_shape_fn((8, 8), |_| rng.random_range(0..3u8)),
                    Array2::from_shape_fn((8, 8), |_| rng.random_range(0..3u8)),
                )
            })
            .collect();
        let mut a = ConfusionMatrix::new(3);
        let mut b = ConfusionMatrix::new(3);
        for (g, p) in &pairs {
            a.accumulate(g.view(), p.view()).unwrap();
        }
        for (g, p) in pairs.iter().rev() {
            b.accumulate(g.view(), p.view()).unwrap();
        }
        assert_eq!(a, b);
    }

    #[test]
    fn forgetting_single_target_is_zero() {
        let m = MetricMatrix::from_rows(tags(1), &[vec![42.0]]).unwrap();
        assert_eq!(accumulated_forgetting(&m).unwrap(), 0.0);
        assert_eq!(miou_average(&m).unwrap(), 42.0);
    }

    #[test]
    fn forgetting_ignores_final_target_score() {
        let rows = |last: f64| {
            vec![
                vec![40.0, 38.0, 37.0],
                vec![60.0, 59.0],
                vec![last],
            ]
        };
        let a = MetricMatrix::from_rows(tags(3), &rows(10.0)).unwrap();
        let b = MetricMatrix::from_rows(tags(3), &rows(90.0)).unwrap();
        assert_eq!(accumulated_forgetting(&a).unwrap(), accumulated_forgetting(&b).unwrap());
        assert!((accumulated_forgetting(&a).unwrap() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn missing_entries_error() {
        let mut m = MetricMatrix::new(tags(2));
        m.set(0, 0, 50.0, None).unwrap();
        assert!(accumulated_forgetting(&m).is_err());
        assert!(m.set(1, 0, 1.0, None).is_err());
    }

    #[test]
    fn json_round_trip() {
        let mut m = MetricMatrix::from_rows(tags(2), &[vec![40.0, 35.5], vec![60.25]]).unwrap();
        m.set(0, 1, 35.5, Some(vec![Some(10.0), None])).unwrap();
        let s = m.to_json_string().unwrap();
        let v: serde_json::Value = serde_json::from_str(&s).unwrap();
        assert_eq!(v["af"].as_f64().unwrap(), 4.5);
        assert_eq!(v["steps"], serde_json::json!([1, 2]));
        assert!(v["miou"][1][0].is_null());
        assert_eq!(MetricMatrix::from_json_str(&s).unwrap(), m);
    }
}
