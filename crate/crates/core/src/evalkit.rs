//! Classification metrics, ROC curves and embedding export.

use std::io::Write;

use crate::error::{Error, Result};
use crate::graph::TactileGraph;
use crate::network::Model;
use crate::synthdata::LabeledSample;

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub accuracy: f64,
    /// `None` when only one class is present.
    pub auc: Option<f64>,
    pub f1: f64,
    /// `confusion[actual][predicted]`
    pub confusion: [[u64; 2]; 2],
    pub roc_points: Vec<(f64, f64)>,
    pub threshold: f64,
}

impl MetricReport {
    pub fn auc_or_nan(&self) -> f64 {
        self.auc.unwrap_or(f64::NAN)
    }

    pub fn to_text(&self) -> String {
        let c = &self.confusion;
        format!(
            "accuracy={}\nauc={}\nauc_defined={}\nf1={}\nthreshold={}\ntn={}\nfp={}\nfn={}\ntp={}\n",
            self.accuracy,
            self.auc.map_or("nan".to_string(), |a| a.to_string()),
            self.auc.is_some(),
            self.f1,
            self.threshold,
            c[0][0],
            c[0][1],
            c[1][0],
            c[1][1]
        )
    }

    pub fn confusion_csv(&self) -> String {
        let c = &self.confusion;
        format!(
            "actual,pred_0,pred_1\n0,{},{}\n1,{},{}\n",
            c[0][0], c[0][1], c[1][0], c[1][1]
        )
    }

    pub fn roc_csv(&self) -> String {
        let mut s = String::from("fpr,tpr\n");
        for (f, t) in &self.roc_points {
            s.push_str(&format!("{f},{t}\n"));
        }
        s
    }
}

fn check(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if labels.iter().any(|&y| y > 1) {
        return Err(Error::InvalidInput("labels must be 0 or 1".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("NaN score".into()));
    }
    Ok(())
}

/// Rank-sum AUC with tied scores sharing their average rank.
pub fn rank_auc(scores: &[f64], labels: &[u8]) -> Result<Option<f64>> {
    check(scores, labels)?;
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Ok(None);
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut k = 0;
    while k < idx.len() {
        let mut end = k + 1;
        while end < idx.len() && scores[idx[end]] == scores[idx[k]] {
            end += 1;
        }
        // ranks k+1 ..= end share their mean
        let avg = (k + 1 + end) as f64 / 2.0;
        rank_sum_pos += avg * idx[k..end].iter().filter(|&&i| labels[i] == 1).count() as f64;
        k = end;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(Some(u / (n_pos * n_neg) as f64))
}

/// ROC points from `(0, 0)` to `(1, 1)`, one per distinct score.
pub fn roc_curve(scores: &[f64], labels: &[u8]) -> Result<Vec<(f64, f64)>> {
    check(scores, labels)?;
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::InvalidInput("ROC needs both classes".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut pts = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut k = 0;
    while k < idx.len() {
        let s = scores[idx[k]];
        while k < idx.len() && scores[idx[k]] == s {
            if labels[idx[k]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        pts.push((fp as f64 / n_neg as f64, tp as f64 / n_pos as f64));
    }
    Ok(pts)
}

pub fn trapezoid_area(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum()
}

/// Pooled node-level metrics at `threshold` (score ≥ threshold predicts 1).
pub fn compute_metrics(scores: &[f64], labels: &[u8], threshold: f64) -> Result<MetricReport> {
    check(scores, labels)?;
    let mut confusion = [[0u64; 2]; 2];
    for (&s, &y) in scores.iter().zip(labels) {
        let p = (s >= threshold) as usize;
        confusion[y as usize][p] += 1;
    }
    let (tn, fp, fn_, tp) = (confusion[0][0], confusion[0][1], confusion[1][0], confusion[1][1]);
    let accuracy = (tp + tn) as f64 / scores.len() as f64;
    let denom = 2 * tp + fp + fn_;
    let f1 = if denom == 0 { 0.0 } else { 2.0 * tp as f64 / denom as f64 };
    let auc = rank_auc(scores, labels)?;
    let roc_points = if auc.is_some() { roc_curve(scores, labels)? } else { Vec::new() };
    Ok(MetricReport {
        accuracy,
        auc,
        f1,
        confusion,
        roc_points,
        threshold,
    })
}

/// Per-sample metrics averaged over samples; AUC averages the samples where
/// it is defined.
pub fn compute_metrics_macro(per_sample: &[(Vec<f64>, Vec<u8>)], threshold: f64) -> Result<(f64, Option<f64>, f64)> {
    if per_sample.is_empty() {
        return Err(Error::InvalidInput("no samples".into()));
    }
    let (mut acc, mut f1, mut auc, mut auc_n) = (0.0, 0.0, 0.0, 0usize);
    for (s, y) in per_sample {
        let r = compute_metrics(s, y, threshold)?;
        acc += r.accuracy;
        f1 += r.f1;
        if let Some(a) = r.auc {
            auc += a;
            auc_n += 1;
        }
    }
    let n = per_sample.len() as f64;
    Ok((acc / n, (auc_n > 0).then(|| auc / auc_n as f64), f1 / n))
}

/// Scores of every node of every sample, in order, with matching labels.
pub fn predict_all(model: &Model, g: &TactileGraph, samples: &[&LabeledSample]) -> Result<(Vec<f64>, Vec<u8>)> {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for s in samples {
        let (sc, _) = model.predict(g, &s.x)?;
        scores.extend(sc);
        labels.extend(&s.y);
    }
    Ok((scores, labels))
}

/// Comma-separated embedding rows (`D` feature columns then the label), one
/// row per node per sample.
pub fn export_embeddings<W: Write>(model: &Model, g: &TactileGraph, samples: &[&LabeledSample], out: &mut W) -> Result<usize> {
    let c = &model.config;
    let d = c.embedding_dim();
    let header: Vec<String> = (0..d).map(|k| format!("e{k}")).chain(["label".to_string()]).collect();
    let io = |e| Error::io("<embedding output>", e);
    writeln!(out, "{}", header.join(",")).map_err(io)?;
    let mut rows = 0;
    for (k, s) in samples.iter().enumerate() {
        if s.x.len() != c.nodes || s.x.iter().any(|m| m.shape() != (c.bands, c.steps)) || s.y.len() != c.nodes {
            return Err(Error::Shape(format!(
                "sample {k} does not match the checkpoint's {}×{}×{} input",
                c.nodes, c.bands, c.steps
            )));
        }
        let (_, emb) = model.predict(g, &s.x)?;
        for i in 0..c.nodes {
            let mut line: Vec<String> = emb.row(i).iter().map(|v| v.to_string()).collect();
            line.push(s.y[i].to_string());
            writeln!(out, "{}", line.join(",")).map_err(io)?;
            rows += 1;
        }
    }
    Ok(rows)
}
