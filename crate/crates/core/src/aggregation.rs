//! Aggregation rules.
//!
//! Every rule consumes a [`ContributionSet`]: the aggregating node's own
//! model and history, the direct neighbors whose latest trained model is
//! known, and histories that only take part in similarity scoring.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{check_len, cosine_similarity, ParamVector};
use crate::topology::NodeId;

#[derive(Debug, Clone, PartialEq)]
pub struct Contribution {
    pub id: NodeId,
    pub model: ParamVector,
    pub history: ParamVector,
    /// Local dataset size, used only by FedAvg.
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContributionSet {
    pub own: Contribution,
    pub direct: Vec<Contribution>,
    /// History-only entries: gossiped records and neighbors without a model.
    pub indirect: Vec<(NodeId, ParamVector)>,
}

impl ContributionSet {
    pub fn new(own: Contribution) -> Self {
        ContributionSet {
            own,
            direct: Vec::new(),
            indirect: Vec::new(),
        }
    }

    /// Own model first, then direct models in order.
    pub fn models(&self) -> Vec<&ParamVector> {
        std::iter::once(&self.own.model)
            .chain(self.direct.iter().map(|c| &c.model))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let len = self.own.model.len();
        let vectors = std::iter::once(&self.own.history)
            .chain(self.direct.iter().flat_map(|c| [&c.model, &c.history]))
            .chain(self.indirect.iter().map(|(_, h)| h));
        for v in vectors {
            check_len(len, v.len())?;
        }
        let mut ids: Vec<NodeId> = std::iter::once(self.own.id)
            .chain(self.direct.iter().map(|c| c.id))
            .chain(self.indirect.iter().map(|(id, _)| *id))
            .collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::invalid(format!("node {} appears twice in contribution set", w[0])));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FoolsgoldParams {
    /// Logit confidence.
    pub kappa: f64,
    /// Inputs to the logit are clipped to `[eps, 1 - eps]`.
    pub logit_eps: f64,
}

impl Default for FoolsgoldParams {
    fn default() -> Self {
        FoolsgoldParams {
            kappa: 1.0,
            logit_eps: 1e-5,
        }
    }
}

impl FoolsgoldParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.kappa > 0.0 && self.kappa.is_finite()) {
            return Err(Error::invalid("kappa must be positive"));
        }
        if !(self.logit_eps > 0.0 && self.logit_eps < 0.5) {
            return Err(Error::invalid("logit_eps must be in (0, 0.5)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AggregationParams {
    pub foolsgold: FoolsgoldParams,
    /// Krum's assumed Byzantine count; `floor((n - 3) / 2)` when unset.
    pub krum_f: Option<usize>,
    /// Models averaged by Multi-Krum; `ceil(n / 2)` when unset.
    pub multikrum_m: Option<usize>,
}

/// Sample-weighted average of models.
pub fn fedavg(models: &[(&ParamVector, usize)]) -> Result<ParamVector> {
    let (first, _) = models.first().ok_or_else(|| Error::invalid("fedavg needs a model"))?;
    if models.iter().any(|&(_, n)| n == 0) {
        return Err(Error::invalid("fedavg sample counts must be positive"));
    }
    let total: usize = models.iter().map(|&(_, n)| n).sum();
    let weighted: Vec<(&ParamVector, f64)> = models
        .iter()
        .map(|&(m, n)| (m, n as f64 / total as f64))
        .collect();
    weighted_average(first.len(), &weighted)
}

fn weighted_average(len: usize, parts: &[(&ParamVector, f64)]) -> Result<ParamVector> {
    let mut out = ParamVector::zeros(len);
    for &(m, w) in parts {
        check_len(len, m.len())?;
        out.axpy(w, m);
    }
    Ok(out)
}

/// Average with weights normalized to sum 1. All-zero weights are rejected.
pub fn normalized_average(models: &[&ParamVector], weights: &[f64]) -> Result<ParamVector> {
    if models.is_empty() || models.len() != weights.len() {
        return Err(Error::invalid("weights must match models one to one"));
    }
    if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
        return Err(Error::invalid("weights must be finite and nonnegative"));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::invalid("weights sum to zero"));
    }
    let parts: Vec<_> = models.iter().zip(weights).map(|(m, w)| (*m, w / total)).collect();
    weighted_average(models[0].len(), &parts)
}

fn mean(models: &[&ParamVector]) -> Result<ParamVector> {
    normalized_average(models, &vec![1.0; models.len()])
}

/// FoolsGold weights in input order, each in `[0, 1]` and not normalized.
pub fn foolsgold_scores(histories: &[&ParamVector], params: &FoolsgoldParams) -> Result<Vec<f64>> {
    let n = histories.len();
    if n < 2 {
        return Err(Error::invalid("foolsgold needs at least 2 histories"));
    }
    params.validate()?;
    let mut sim = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let s = cosine_similarity(histories[i], histories[j])?;
            sim[i][j] = s;
            sim[j][i] = s;
        }
    }
    let row_max = |sim: &[Vec<f64>], i: usize| {
        (0..n)
            .filter(|&j| j != i)
            .map(|j| sim[i][j])
            .fold(f64::NEG_INFINITY, f64::max)
    };

    // pardoning, all pairs against the pre-pardon maxima
    let max_before: Vec<f64> = (0..n).map(|i| row_max(&sim, i)).collect();
    for i in 0..n {
        for j in 0..n {
            if i != j && max_before[i] < max_before[j] && max_before[j] > 0.0 {
                sim[i][j] *= max_before[i] / max_before[j];
            }
        }
    }

    let mut w: Vec<f64> = (0..n).map(|i| (1.0 - row_max(&sim, i)).clamp(0.0, 1.0)).collect();
    let top = w.iter().copied().fold(0.0, f64::max);
    if top > 0.0 {
        w.iter_mut().for_each(|x| *x /= top);
    }
    let eps = params.logit_eps;
    Ok(w.into_iter()
        .map(|x| {
            let x = x.clamp(eps, 1.0 - eps);
            (params.kappa * ((x / (1.0 - x)).ln() + 0.5)).clamp(0.0, 1.0)
        })
        .collect())
}

/// Per model, the sum of squared distances to its `n - f - 2` nearest others.
pub fn krum_score(models: &[&ParamVector], f: usize) -> Result<Vec<f64>> {
    let n = models.len();
    if n < f + 3 {
        return Err(Error::invalid(format!("krum needs n >= f + 3 = {}, got n = {n}", f + 3)));
    }
    for m in models {
        check_len(models[0].len(), m.len())?;
    }
    let mut dist = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let d = models[i].sq_distance(models[j]);
            dist[i][j] = d;
            dist[j][i] = d;
        }
    }
    let keep = n - f - 2;
    Ok((0..n)
        .map(|i| {
            let mut row: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| dist[i][j]).collect();
            row.sort_by(f64::total_cmp);
            row[..keep].iter().sum()
        })
        .collect())
}

/// Indices ordered by ascending krum score, ties by index.
fn krum_order(models: &[&ParamVector], f: usize) -> Result<Vec<usize>> {
    let scores = krum_score(models, f)?;
    let mut order: Vec<usize> = (0..models.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    Ok(order)
}

pub fn krum_select_index(models: &[&ParamVector], f: usize) -> Result<usize> {
    Ok(krum_order(models, f)?[0])
}

pub fn krum_select(models: &[&ParamVector], f: usize) -> Result<ParamVector> {
    Ok(models[krum_select_index(models, f)?].clone())
}

pub fn multi_krum(models: &[&ParamVector], f: usize, m: usize) -> Result<ParamVector> {
    if m == 0 || m > models.len() {
        return Err(Error::invalid(format!("multi-krum m={m} must be in 1..={}", models.len())));
    }
    let order = krum_order(models, f)?;
    let chosen: Vec<&ParamVector> = order[..m].iter().map(|&i| models[i]).collect();
    mean(&chosen)
}

pub fn coordinate_median(models: &[&ParamVector]) -> Result<ParamVector> {
    let first = models.first().ok_or_else(|| Error::invalid("median needs a model"))?;
    let len = first.len();
    for m in models {
        check_len(len, m.len())?;
    }
    let mut column = vec![0.0; models.len()];
    let values = (0..len)
        .map(|k| {
            for (slot, m) in column.iter_mut().zip(models) {
                *slot = m.as_slice()[k];
            }
            column.sort_by(f64::total_cmp);
            let mid = column.len() / 2;
            if column.len() % 2 == 1 {
                column[mid]
            } else {
                0.5 * (column[mid - 1] + column[mid])
            }
        })
        .collect();
    Ok(ParamVector::new(values))
}

/// Per-coordinate smallest value whose cumulative weight reaches half the total.
pub fn weighted_coordinate_median(models: &[&ParamVector], weights: &[f64]) -> Result<ParamVector> {
    if models.is_empty() || models.len() != weights.len() {
        return Err(Error::invalid("weights must match models one to one"));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) || weights.iter().any(|w| *w < 0.0) {
        return Err(Error::invalid("weighted median needs nonnegative weights with positive sum"));
    }
    let len = models[0].len();
    for m in models {
        check_len(len, m.len())?;
    }
    let mut column: Vec<(f64, f64)> = vec![(0.0, 0.0); models.len()];
    let values = (0..len)
        .map(|k| {
            for ((slot, m), &w) in column.iter_mut().zip(models).zip(weights) {
                *slot = (m.as_slice()[k], w);
            }
            column.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut acc = 0.0;
            for &(v, w) in &column {
                acc += w;
                if acc >= 0.5 * total {
                    return v;
                }
            }
            column[column.len() - 1].0
        })
        .collect();
    Ok(ParamVector::new(values))
}

/// Unnormalized SybilWall weights: own first, then direct neighbors.
#[derive(Debug, Clone, PartialEq)]
pub struct SybilwallWeights {
    pub weights: Vec<f64>,
    /// Only one history was available, so no similarity baseline existed.
    pub degenerate: bool,
}

pub fn sybilwall_weights(c: &ContributionSet, params: &FoolsgoldParams) -> Result<SybilwallWeights> {
    c.validate()?;
    if c.direct.is_empty() {
        return Err(Error::invalid("sybilwall needs at least one direct neighbor"));
    }
    let histories: Vec<&ParamVector> = c
        .direct
        .iter()
        .map(|d| &d.history)
        .chain(c.indirect.iter().map(|(_, h)| h))
        .collect();
    let (retained, degenerate) = if histories.len() == 1 {
        (vec![0.5], true)
    } else {
        let mut scores = foolsgold_scores(&histories, params)?;
        scores.truncate(c.direct.len());
        (scores, false)
    };
    let own = retained.iter().copied().fold(1.0, f64::max);
    let mut weights = Vec::with_capacity(retained.len() + 1);
    weights.push(own);
    weights.extend(retained);
    Ok(SybilwallWeights { weights, degenerate })
}

pub fn sybilwall_aggregate(c: &ContributionSet, params: &FoolsgoldParams) -> Result<ParamVector> {
    let w = sybilwall_weights(c, params)?;
    normalized_average(&c.models(), &w.weights)
}

fn check_weights(c: &ContributionSet, weights: &[f64]) -> Result<()> {
    if weights.len() != c.direct.len() + 1 {
        return Err(Error::invalid(format!(
            "{} weights for {} models",
            weights.len(),
            c.direct.len() + 1
        )));
    }
    Ok(())
}

/// Coordinate median over the top half of models by weight (ties by position).
pub fn enhance_median(c: &ContributionSet, weights: &[f64]) -> Result<ParamVector> {
    check_weights(c, weights)?;
    let models = c.models();
    let mut order: Vec<usize> = (0..models.len()).collect();
    order.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then(a.cmp(&b)));
    let top: Vec<&ParamVector> = order[..models.len().div_ceil(2)].iter().map(|&i| models[i]).collect();
    coordinate_median(&top)
}

pub fn enhance_weighted_median(c: &ContributionSet, weights: &[f64]) -> Result<ParamVector> {
    check_weights(c, weights)?;
    weighted_coordinate_median(&c.models(), weights)
}

/// Zeroes the weight of the lowest krum score (f = 1), then averages.
/// With fewer than 4 models, or if nothing would remain, no model is dropped.
pub fn enhance_krum_filter(c: &ContributionSet, weights: &[f64]) -> Result<ParamVector> {
    check_weights(c, weights)?;
    let models = c.models();
    let mut w = weights.to_vec();
    if models.len() >= 4 {
        let drop = krum_select_index(&models, 1)?;
        let saved = w[drop];
        w[drop] = 0.0;
        if w.iter().sum::<f64>() <= 0.0 {
            w[drop] = saved;
        }
    }
    normalized_average(&models, &w)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AggregatorKind {
    FedAvg,
    FoolsGold,
    Krum,
    MultiKrum,
    Median,
    SybilWall,
    SybilWallMedian,
    SybilWallWeightedMedian,
    SybilWallKrumFilter,
}

impl AggregatorKind {
    pub const ALL: [AggregatorKind; 9] = [
        AggregatorKind::FedAvg,
        AggregatorKind::FoolsGold,
        AggregatorKind::Krum,
        AggregatorKind::MultiKrum,
        AggregatorKind::Median,
        AggregatorKind::SybilWall,
        AggregatorKind::SybilWallMedian,
        AggregatorKind::SybilWallWeightedMedian,
        AggregatorKind::SybilWallKrumFilter,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AggregatorKind::FedAvg => "fedavg",
            AggregatorKind::FoolsGold => "foolsgold",
            AggregatorKind::Krum => "krum",
            AggregatorKind::MultiKrum => "multikrum",
            AggregatorKind::Median => "median",
            AggregatorKind::SybilWall => "sybilwall",
            AggregatorKind::SybilWallMedian => "sybilwall+median",
            AggregatorKind::SybilWallWeightedMedian => "sybilwall+wmedian",
            AggregatorKind::SybilWallKrumFilter => "sybilwall+krumfilter",
        }
    }

    /// Whether the rule scores histories and therefore benefits from gossip.
    pub fn uses_histories(self) -> bool {
        !matches!(
            self,
            AggregatorKind::FedAvg | AggregatorKind::Krum | AggregatorKind::MultiKrum | AggregatorKind::Median
        )
    }
}

impl fmt::Display for AggregatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AggregatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AggregatorKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = AggregatorKind::ALL.iter().map(|k| k.name()).collect();
                Error::invalid(format!("unknown aggregator `{s}`; expected one of {}", names.join(", ")))
            })
    }
}

impl Serialize for AggregatorKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for AggregatorKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aggregated {
    pub model: ParamVector,
    pub degenerate: bool,
}

/// Runs one rule over a node's neighborhood. A node with no direct
/// contributions keeps its own model.
pub fn aggregate(kind: AggregatorKind, c: &ContributionSet, params: &AggregationParams) -> Result<Aggregated> {
    c.validate()?;
    let plain = |model| Ok(Aggregated { model, degenerate: false });
    if c.direct.is_empty() {
        return plain(c.own.model.clone());
    }
    let models = c.models();
    let n = models.len();
    match kind {
        AggregatorKind::FedAvg => {
            let weighted: Vec<_> = std::iter::once(&c.own)
                .chain(&c.direct)
                .map(|x| (&x.model, x.samples.max(1)))
                .collect();
            plain(fedavg(&weighted)?)
        }
        AggregatorKind::FoolsGold => {
            let histories: Vec<&ParamVector> = std::iter::once(&c.own.history)
                .chain(c.direct.iter().map(|d| &d.history))
                .collect();
            let w = foolsgold_scores(&histories, &params.foolsgold)?;
            if w.iter().sum::<f64>() > 0.0 {
                plain(normalized_average(&models, &w)?)
            } else {
                plain(c.own.model.clone())
            }
        }
        AggregatorKind::Krum | AggregatorKind::MultiKrum if n < 3 => plain(mean(&models)?),
        AggregatorKind::Krum => {
            let f = params.krum_f.unwrap_or((n - 3) / 2).min(n - 3);
            plain(krum_select(&models, f)?)
        }
        AggregatorKind::MultiKrum => {
            let f = params.krum_f.unwrap_or((n - 3) / 2).min(n - 3);
            let m = params.multikrum_m.unwrap_or(n.div_ceil(2)).clamp(1, n);
            plain(multi_krum(&models, f, m)?)
        }
        AggregatorKind::Median => plain(coordinate_median(&models)?),
        AggregatorKind::SybilWall
        | AggregatorKind::SybilWallMedian
        | AggregatorKind::SybilWallWeightedMedian
        | AggregatorKind::SybilWallKrumFilter => {
            let sw = sybilwall_weights(c, &params.foolsgold)?;
            let model = match kind {
                AggregatorKind::SybilWallMedian => enhance_median(c, &sw.weights)?,
                AggregatorKind::SybilWallWeightedMedian => enhance_weighted_median(c, &sw.weights)?,
                AggregatorKind::SybilWallKrumFilter => enhance_krum_filter(c, &sw.weights)?,
                _ => normalized_average(&models, &sw.weights)?,
            };
            Ok(Aggregated {
                model,
                degenerate: sw.degenerate,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::new(v.to_vec())
    }

    fn contrib(id: NodeId, model: &[f64], history: &[f64]) -> Contribution {
        Contribution {
            id,
            model: pv(model),
            history: pv(history),
            samples: 1,
        }
    }

    fn close(a: &ParamVector, b: &[f64], tol: f64) -> bool {
        a.as_slice().iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn fedavg_examples() {
        let a = pv(&[1.0, 2.0]);
        assert_eq!(fedavg(&[(&a, 4)]).unwrap(), a);
        let (x, y) = (pv(&[1.0, 1.0]), pv(&[3.0, 3.0]));
        assert_eq!(fedavg(&[(&x, 2), (&y, 2)]).unwrap(), pv(&[2.0, 2.0]));
        let (z, f) = (pv(&[0.0]), pv(&[4.0]));
        assert_eq!(fedavg(&[(&z, 1), (&f, 3)]).unwrap(), pv(&[3.0]));
        assert!(matches!(fedavg(&[(&z, 1), (&x, 1)]), Err(Error::DimensionMismatch { .. })));
        assert!(fedavg(&[]).is_err());
    }

    /// Straight transcription of the scoring steps on explicit matrices.
    fn foolsgold_oracle(h: &[Vec<f64>]) -> Vec<f64> {
        let n = h.len();
        let cos = |a: &[f64], b: &[f64]| {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            if na == 0.0 || nb == 0.0 {
                0.0
            } else {
                (dot / (na * nb)).clamp(-1.0, 1.0)
            }
        };
        let mut s = vec![vec![f64::NEG_INFINITY; n]; n];
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s[i][j] = cos(&h[i], &h[j]);
                }
            }
        }
        let maxes: Vec<f64> = s.iter().map(|r| r.iter().cloned().fold(f64::NEG_INFINITY, f64::max)).collect();
        let mut p = s.clone();
        for i in 0..n {
            for j in 0..n {
                if i != j && maxes[i] < maxes[j] && maxes[j] > 0.0 {
                    p[i][j] = s[i][j] * maxes[i] / maxes[j];
                }
            }
        }
        let mut w: Vec<f64> = p
            .iter()
            .map(|r| 1.0 - r.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
            .map(|x| x.clamp(0.0, 1.0))
            .collect();
        let m = w.iter().cloned().fold(0.0, f64::max);
        if m > 0.0 {
            for x in &mut w {
                *x /= m;
            }
        }
        w.iter()
            .map(|&x| {
                let x = x.clamp(1e-5, 1.0 - 1e-5);
                ((x / (1.0 - x)).ln() + 0.5).clamp(0.0, 1.0)
            })
            .collect()
    }

    #[test]
    fn foolsgold_clones_and_orthogonal() {
        let (a, b, c) = (pv(&[1.0, 0.0, 0.0]), pv(&[1.0, 0.0, 0.0]), pv(&[0.0, 1.0, 0.0]));
        let w = foolsgold_scores(&[&a, &b, &c], &FoolsgoldParams::default()).unwrap();
        assert!(w[0] < 1e-9 && w[1] < 1e-9);
        assert_eq!(w[2], 1.0);
        let e: Vec<ParamVector> = (0..4).map(|i| {
            let mut v = vec![0.0; 4];
            v[i] = 2.0;
            pv(&v)
        }).collect();
        let refs: Vec<&ParamVector> = e.iter().collect();
        let w = foolsgold_scores(&refs, &FoolsgoldParams::default()).unwrap();
        assert!(w.iter().all(|&x| x == w[0]));
        assert!(foolsgold_scores(&[&a], &FoolsgoldParams::default()).is_err());
    }

    #[test]
    fn foolsgold_matches_oracle_on_fixed_vectors() {
        let h = vec![vec![1.0, 0.2, 0.0], vec![0.9, 0.3, 0.1], vec![-0.2, 1.0, 0.4]];
        let pvs: Vec<ParamVector> = h.iter().map(|v| pv(v)).collect();
        let refs: Vec<&ParamVector> = pvs.iter().collect();
        let got = foolsgold_scores(&refs, &FoolsgoldParams::default()).unwrap();
        for (g, o) in got.iter().zip(foolsgold_oracle(&h)) {
            assert!((g - o).abs() < 1e-9);
        }
    }

    fn brute_krum(models: &[Vec<f64>], f: usize) -> Vec<f64> {
        let n = models.len();
        (0..n)
            .map(|i| {
                let mut d: Vec<f64> = (0..n)
                    .filter(|&j| j != i)
                    .map(|j| models[i].iter().zip(&models[j]).map(|(a, b)| (a - b) * (a - b)).sum())
                    .collect();
                d.sort_by(|a, b| a.partial_cmp(b).unwrap());
                d.iter().take(n - f - 2).sum()
            })
            .collect()
    }

    #[test]
    fn krum_examples() {
        let ms = [pv(&[0.0]), pv(&[1.0]), pv(&[3.0])];
        let refs: Vec<_> = ms.iter().collect();
        assert_eq!(krum_score(&refs, 0).unwrap(), vec![1.0, 1.0, 4.0]);
        let same = vec![pv(&[2.0, 2.0]); 4];
        let refs: Vec<_> = same.iter().collect();
        assert_eq!(krum_score(&refs, 1).unwrap(), vec![0.0; 4]);
        assert_eq!(krum_select_index(&refs, 1).unwrap(), 0);
        let tri = [pv(&[0.0, 0.0]), pv(&[1.0, 0.0]), pv(&[0.5, 3f64.sqrt() / 2.0])];
        let refs: Vec<_> = tri.iter().collect();
        assert_eq!(krum_select_index(&refs, 0).unwrap(), 0);
        let mut cluster: Vec<ParamVector> = (0..5).map(|i| pv(&[i as f64 * 0.1, 0.0])).collect();
        cluster.push(pv(&[50.0, 50.0]));
        let refs: Vec<_> = cluster.iter().collect();
        let scores = krum_score(&refs, 1).unwrap();
        assert!(scores[..5].iter().all(|&s| s < scores[5]));
        assert!(krum_select_index(&refs, 1).unwrap() < 5);
        assert!(matches!(krum_score(&refs[..3], 1), Err(Error::InvalidInput(m)) if m.contains("f + 3")));
    }

    #[test]
    fn multikrum_examples() {
        let ms: Vec<ParamVector> = [[0.0, 1.0], [0.2, 0.9], [0.1, 1.1], [5.0, 5.0], [0.3, 1.0]]
            .iter()
            .map(|v| pv(v))
            .collect();
        let refs: Vec<_> = ms.iter().collect();
        assert_eq!(multi_krum(&refs, 1, 1).unwrap(), krum_select(&refs, 1).unwrap());
        assert_eq!(multi_krum(&refs, 1, 5).unwrap(), mean(&refs).unwrap());
        let raw: Vec<Vec<f64>> = ms.iter().map(|m| m.as_slice().to_vec()).collect();
        let s = brute_krum(&raw, 1);
        let mut idx: Vec<usize> = (0..5).collect();
        idx.sort_by(|&a, &b| s[a].partial_cmp(&s[b]).unwrap().then(a.cmp(&b)));
        let expect: Vec<f64> = (0..2).map(|k| (raw[idx[0]][k] + raw[idx[1]][k]) / 2.0).collect();
        assert!(close(&multi_krum(&refs, 1, 2).unwrap(), &expect, 1e-12));
        assert!(multi_krum(&refs, 1, 0).is_err());
    }

    #[test]
    fn median_examples() {
        let ms = [pv(&[1.0, 5.0]), pv(&[2.0, 4.0]), pv(&[100.0, -3.0])];
        let refs: Vec<_> = ms.iter().collect();
        assert_eq!(coordinate_median(&refs).unwrap(), pv(&[2.0, 4.0]));
        assert_eq!(coordinate_median(&refs[..1]).unwrap(), ms[0]);
        let even = [pv(&[1.0]), pv(&[3.0])];
        let refs: Vec<_> = even.iter().collect();
        assert_eq!(coordinate_median(&refs).unwrap(), pv(&[2.0]));
    }

    #[test]
    fn sybilwall_orthogonal_neighbor_is_trusted() {
        let mut c = ContributionSet::new(contrib(0, &[0.0, 0.0, 0.0, 0.0], &[1.0, 1.0, 0.0, 0.0]));
        c.direct.push(contrib(1, &[2.0, 4.0, 0.0, 0.0], &[0.0, 0.0, 1.0, 0.0]));
        c.indirect.push((2, pv(&[1.0, 0.0, 0.0, 0.0])));
        c.indirect.push((3, pv(&[0.0, 1.0, 0.0, 0.0])));
        let out = sybilwall_aggregate(&c, &FoolsgoldParams::default()).unwrap();
        assert!(close(&out, &[1.0, 2.0, 0.0, 0.0], 1e-9));
    }

    #[test]
    fn sybilwall_direct_clones_are_excluded() {
        let mut c = ContributionSet::new(contrib(0, &[1.0, 1.0, 1.0], &[1.0, 0.0, 0.0]));
        c.direct.push(contrib(1, &[9.0, 9.0, 9.0], &[0.0, 0.0, 1.0]));
        c.direct.push(contrib(2, &[9.0, 9.0, 9.0], &[0.0, 0.0, 1.0]));
        c.indirect.push((3, pv(&[0.0, 1.0, 0.0])));
        let out = sybilwall_aggregate(&c, &FoolsgoldParams::default()).unwrap();
        assert!(close(&out, &[1.0, 1.0, 1.0], 1e-4));
    }

    #[test]
    fn sybilwall_gossip_exposes_a_single_attack_edge() {
        let mut c = ContributionSet::new(contrib(0, &[1.0, 1.0, 1.0], &[1.0, 0.0, 0.0]));
        c.direct.push(contrib(1, &[9.0, 9.0, 9.0], &[0.0, 0.0, 1.0]));
        c.direct.push(contrib(2, &[1.5, 1.5, 1.5], &[0.0, 1.0, 0.0]));
        c.indirect.push((7, pv(&[0.0, 0.0, 1.0])));
        let w = sybilwall_weights(&c, &FoolsgoldParams::default()).unwrap();
        assert!(w.weights[1] < 1e-9);
        assert!(w.weights[2] > 0.5);
        // without gossip the lone sybil looks like any other neighbor
        c.indirect.clear();
        let w = sybilwall_weights(&c, &FoolsgoldParams::default()).unwrap();
        assert!(w.weights[1] > 0.5);
    }

    #[test]
    fn sybilwall_edge_cases() {
        let mut c = ContributionSet::new(contrib(0, &[0.0], &[1.0]));
        assert!(sybilwall_aggregate(&c, &FoolsgoldParams::default()).is_err());
        c.direct.push(contrib(1, &[3.0], &[1.0]));
        let w = sybilwall_weights(&c, &FoolsgoldParams::default()).unwrap();
        assert!(w.degenerate);
        assert_eq!(w.weights, vec![1.0, 0.5]);
        assert_eq!(sybilwall_aggregate(&c, &FoolsgoldParams::default()).unwrap(), pv(&[1.0]));
        c.indirect.push((1, pv(&[2.0])));
        assert!(c.validate().is_err());
    }

    fn four_model_set() -> ContributionSet {
        let mut c = ContributionSet::new(contrib(0, &[0.0, 10.0], &[1.0, 0.0]));
        c.direct.push(contrib(1, &[1.0, 12.0], &[0.0, 1.0]));
        c.direct.push(contrib(2, &[2.0, 11.0], &[1.0, 1.0]));
        c.direct.push(contrib(3, &[7.0, -4.0], &[1.0, -1.0]));
        c
    }

    #[test]
    fn enhancement_identities() {
        let c = ContributionSet::new(contrib(0, &[3.0, 4.0], &[1.0, 1.0]));
        for f in [enhance_median, enhance_weighted_median, enhance_krum_filter] {
            assert_eq!(f(&c, &[1.0]).unwrap(), pv(&[3.0, 4.0]));
            assert!(f(&c, &[1.0, 1.0]).is_err());
        }
        let c = four_model_set();
        let eq = [1.0; 4];
        let models = c.models();
        // three-model median equals the unweighted one
        let mut three = c.clone();
        three.direct.pop();
        assert_eq!(enhance_weighted_median(&three, &[1.0; 3]).unwrap(), coordinate_median(&three.models()).unwrap());
        assert_eq!(enhance_median(&c, &eq).unwrap(), coordinate_median(&models[..2]).unwrap());
    }

    #[test]
    fn enhancements_match_brute_force() {
        let c = four_model_set();
        let w = [1.0, 0.2, 0.9, 0.4];
        let raw: Vec<Vec<f64>> = c.models().iter().map(|m| m.as_slice().to_vec()).collect();
        // top half by weight: models 0 and 2
        let expect: Vec<f64> = (0..2).map(|k| (raw[0][k] + raw[2][k]) / 2.0).collect();
        assert!(close(&enhance_median(&c, &w).unwrap(), &expect, 1e-12));
        // weighted median: total 2.5, half 1.25
        let mut wm = Vec::new();
        for k in 0..2 {
            let mut col: Vec<(f64, f64)> = raw.iter().map(|r| r[k]).zip(w).collect();
            col.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            let mut acc = 0.0;
            wm.push(col.iter().find(|(_, x)| { acc += x; acc >= 1.25 }).unwrap().0);
        }
        assert_eq!(enhance_weighted_median(&c, &w).unwrap().as_slice(), &wm[..]);
        let scores = brute_krum(&raw, 1);
        let drop = (0..4).min_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap()).unwrap();
        let mut kept = w;
        kept[drop] = 0.0;
        let total: f64 = kept.iter().sum();
        let expect: Vec<f64> = (0..2).map(|k| (0..4).map(|i| kept[i] / total * raw[i][k]).sum()).collect();
        assert!(close(&enhance_krum_filter(&c, &w).unwrap(), &expect, 1e-12));
    }

    #[test]
    fn aggregator_names_roundtrip() {
        for k in AggregatorKind::ALL {
            assert_eq!(k.name().parse::<AggregatorKind>().unwrap(), k);
            let json = serde_json::to_string(&k).unwrap();
            assert_eq!(serde_json::from_str::<AggregatorKind>(&json).unwrap(), k);
        }
        assert!("trimmed-mean".parse::<AggregatorKind>().is_err());
    }

    #[test]
    fn every_rule_runs_on_small_neighborhoods() {
        let params = AggregationParams::default();
        let mut c = ContributionSet::new(contrib(0, &[0.0, 1.0], &[1.0, 0.0]));
        for k in AggregatorKind::ALL {
            assert_eq!(aggregate(k, &c, &params).unwrap().model, c.own.model);
        }
        c.direct.push(contrib(1, &[2.0, 1.0], &[0.0, 1.0]));
        for k in AggregatorKind::ALL {
            aggregate(k, &c, &params).unwrap();
        }
        let c = four_model_set();
        for k in AggregatorKind::ALL {
            let out = aggregate(k, &c, &params).unwrap();
            assert!(out.model.is_finite(), "{k}");
        }
    }

    fn random_vectors(rng: &mut impl Rng, n: usize, dim: usize) -> Vec<ParamVector> {
        (0..n)
            .map(|_| ParamVector::new((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()))
            .collect()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn foolsgold_scale_invariant(seed in 0u64..1_000_000, n in 2usize..7, alpha in 0.01f64..100.0) {
            let mut rng = crate::rng::from_seed(seed);
            let hs = random_vectors(&mut rng, n, 5);
            let scaled: Vec<ParamVector> = hs.iter().map(|h| h.scaled(alpha)).collect();
            let a = foolsgold_scores(&hs.iter().collect::<Vec<_>>(), &FoolsgoldParams::default()).unwrap();
            let b = foolsgold_scores(&scaled.iter().collect::<Vec<_>>(), &FoolsgoldParams::default()).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }

        #[test]
        fn foolsgold_matches_oracle(seed in 0u64..1_000_000, n in 3usize..7) {
            let mut rng = crate::rng::from_seed(seed);
            let hs = random_vectors(&mut rng, n, 6);
            let raw: Vec<Vec<f64>> = hs.iter().map(|h| h.as_slice().to_vec()).collect();
            let got = foolsgold_scores(&hs.iter().collect::<Vec<_>>(), &FoolsgoldParams::default()).unwrap();
            for (g, o) in got.iter().zip(foolsgold_oracle(&raw)) {
                prop_assert!((g - o).abs() < 1e-9);
            }
        }

        #[test]
        fn sybilwall_is_convex(seed in 0u64..1_000_000, direct in 1usize..6, indirect in 0usize..4) {
            let mut rng = crate::rng::from_seed(seed);
            let hs = random_vectors(&mut rng, direct + indirect + 1, 4);
            let ms = random_vectors(&mut rng, direct + 1, 4);
            let mut c = ContributionSet::new(Contribution { id: 0, model: ms[0].clone(), history: hs[0].clone(), samples: 1 });
            for i in 0..direct {
                c.direct.push(Contribution { id: i + 1, model: ms[i + 1].clone(), history: hs[i + 1].clone(), samples: 1 });
            }
            for i in 0..indirect {
                c.indirect.push((100 + i, hs[direct + 1 + i].clone()));
            }
            let w = sybilwall_weights(&c, &FoolsgoldParams::default()).unwrap();
            prop_assert!(w.weights.iter().all(|&x| (0.0..=1.0).contains(&x)));
            prop_assert_eq!(w.weights[0], 1.0);
            let total: f64 = w.weights.iter().sum();
            let mut expect = ParamVector::zeros(4);
            for (m, x) in c.models().iter().zip(&w.weights) {
                expect.axpy(x / total, m);
            }
            let out = sybilwall_aggregate(&c, &FoolsgoldParams::default()).unwrap();
            prop_assert!(out.sq_distance(&expect) < 1e-20);
        }

        #[test]
        fn krum_matches_brute_force(seed in 0u64..1_000_000, n in 3usize..8, f_raw in 0usize..5) {
            let f = f_raw.min(n - 3);
            let mut rng = crate::rng::from_seed(seed);
            let ms = random_vectors(&mut rng, n, 3);
            let raw: Vec<Vec<f64>> = ms.iter().map(|m| m.as_slice().to_vec()).collect();
            let refs: Vec<_> = ms.iter().collect();
            let got = krum_score(&refs, f).unwrap();
            let oracle = brute_krum(&raw, f);
            for (g, o) in got.iter().zip(&oracle) {
                prop_assert!((g - o).abs() < 1e-12);
            }
            let best = (0..n).min_by(|&a, &b| oracle[a].partial_cmp(&oracle[b]).unwrap().then(a.cmp(&b))).unwrap();
            prop_assert_eq!(krum_select_index(&refs, f).unwrap(), best);
        }

        #[test]
        fn median_permutation_invariant_and_bounded(seed in 0u64..1_000_000, n in 1usize..9) {
            let mut rng = crate::rng::from_seed(seed);
            let ms = random_vectors(&mut rng, n, 4);
            let mut refs: Vec<_> = ms.iter().collect();
            let a = coordinate_median(&refs).unwrap();
            refs.reverse();
            refs.rotate_left(n / 2);
            prop_assert_eq!(&a, &coordinate_median(&refs).unwrap());
            for k in 0..4 {
                let col: Vec<f64> = ms.iter().map(|m| m.as_slice()[k]).collect();
                let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(lo <= a.as_slice()[k] && a.as_slice()[k] <= hi);
            }
        }
    }
}
