//! Ensembles of explanation methods: AGG-Mean, AGG-Var and the
//! bias-variance diagnostic that motivates them.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::explain::{self, ExplainerSpec, Heatmap};
use crate::model::Network;

/// How member maps are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AggregationKind {
    #[default]
    Mean,
    Var,
}

/// Two or more distinct explanation methods and their aggregation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "EnsembleRepr", into = "EnsembleRepr")]
pub struct Ensemble {
    members: Vec<ExplainerSpec>,
    kind: AggregationKind,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EnsembleRepr {
    #[serde(deserialize_with = "explain::deserialize_specs")]
    members: Vec<ExplainerSpec>,
    #[serde(default)]
    kind: AggregationKind,
}

impl TryFrom<EnsembleRepr> for Ensemble {
    type Error = Error;

    fn try_from(r: EnsembleRepr) -> Result<Self> {
        Ensemble::new(r.members, r.kind)
    }
}

impl From<Ensemble> for EnsembleRepr {
    fn from(e: Ensemble) -> Self {
        EnsembleRepr {
            members: e.members,
            kind: e.kind,
        }
    }
}

impl Ensemble {
    pub fn new(members: Vec<ExplainerSpec>, kind: AggregationKind) -> Result<Self> {
        if members.len() < 2 {
            return Err(Error::InvalidParameter(format!(
                "an ensemble needs at least two members, got {}",
                members.len()
            )));
        }
        for (i, m) in members.iter().enumerate() {
            m.validate()?;
            if members[..i].contains(m) {
                return Err(Error::InvalidParameter(format!("duplicate ensemble member {m}")));
            }
        }
        Ok(Ensemble { members, kind })
    }

    /// `{SM, GB, LRP}` averaged.
    pub fn default_mean() -> Self {
        Ensemble {
            members: vec![ExplainerSpec::Saliency, ExplainerSpec::GuidedBackprop, ExplainerSpec::lrp()],
            kind: AggregationKind::Mean,
        }
    }

    pub fn members(&self) -> &[ExplainerSpec] {
        &self.members
    }

    pub fn kind(&self) -> AggregationKind {
        self.kind
    }

    /// `AGG-Mean(SM+GB+LRP)` style label.
    pub fn name(&self) -> String {
        let kind = match self.kind {
            AggregationKind::Mean => "AGG-Mean",
            AggregationKind::Var => "AGG-Var",
        };
        let names: Vec<&str> = self.members.iter().map(|m| m.name()).collect();
        format!("{kind}({})", names.join("+"))
    }

    /// Aggregated, normalized heatmap of `x` for `class`.
    pub fn explain(&self, net: &Network, x: &Tensor, class: usize) -> Result<Heatmap> {
        let maps = self
            .members
            .iter()
            .map(|m| explain::explain_normalized(net, x, class, m))
            .collect::<Result<Vec<_>>>()?;
        match self.kind {
            AggregationKind::Mean => agg_mean(&maps),
            AggregationKind::Var => agg_var(&maps),
        }
    }
}

fn check_members(maps: &[Heatmap]) -> Result<()> {
    if maps.len() < 2 {
        return Err(Error::InvalidParameter(format!(
            "aggregation needs at least two maps, got {}",
            maps.len()
        )));
    }
    for m in maps {
        maps[0].check_same_shape(m, "aggregate")?;
        if !m.is_normalized() {
            return Err(Error::NotNormalized);
        }
    }
    Ok(())
}

/// Running mean per pixel; exact when all members agree.
fn pixel_mean(maps: &[Heatmap]) -> Vec<f64> {
    let mut mean = maps[0].values().to_vec();
    for (k, m) in maps.iter().enumerate().skip(1) {
        for (mu, v) in mean.iter_mut().zip(m.values()) {
            *mu += (v - *mu) / (k + 1) as f64;
        }
    }
    mean
}

/// Elementwise mean of normalized maps.
pub fn agg_mean(maps: &[Heatmap]) -> Result<Heatmap> {
    check_members(maps)?;
    let [rows, cols] = maps[0].shape();
    Heatmap::from_normalized(rows, cols, pixel_mean(maps))
}

/// `mean / (std + c)` per pixel with `c` ten times the mean of the
/// per-pixel (population) standard deviation, then renormalized.
pub fn agg_var(maps: &[Heatmap]) -> Result<Heatmap> {
    check_members(maps)?;
    let mean = pixel_mean(maps);
    let j = maps.len() as f64;
    let std: Vec<f64> = mean
        .iter()
        .enumerate()
        .map(|(p, mu)| (maps.iter().map(|m| (m.values()[p] - mu).powi(2)).sum::<f64>() / j).sqrt())
        .collect();
    let c = 10.0 * std.iter().sum::<f64>() / std.len() as f64;
    if c == 0.0 {
        return Err(Error::DegenerateEnsemble);
    }
    let [rows, cols] = maps[0].shape();
    let raw: Vec<f64> = mean.iter().zip(&std).map(|(mu, s)| mu / (s + c)).collect();
    Heatmap::new(rows, cols, raw)?.normalize()
}

/// AGG-Mean as a differentiable expression. AGG-Var is not supported.
pub(crate) fn ensemble_map_on_tape<'t>(
    ensemble: &Ensemble,
    net: &Network,
    tape: &'t Tape,
    x: Var<'t>,
    class: usize,
    seed: u64,
) -> Result<Var<'t>> {
    if ensemble.kind != AggregationKind::Mean {
        return Err(Error::Unsupported(
            "attacking AGG-Var; only AGG-Mean ensembles can be optimized through".into(),
        ));
    }
    let mut total: Option<Var<'t>> = None;
    for m in &ensemble.members {
        let raw = explain::raw_map_on_tape(net, tape, x, class, &m.with_seed(seed), true)?;
        let n = explain::normalize_on_tape(raw)?;
        total = Some(match total {
            Some(t) => t.add(n)?,
            None => n,
        });
    }
    Ok(total.expect("two or more members").scale(1.0 / ensemble.members.len() as f64))
}

/// Error decomposition of an ensemble against a known ground truth.
///
/// Every quantity is a mean over samples and pixels of squared differences.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BiasVarianceReport {
    /// Error of each method against the truth.
    pub method_mse: Vec<f64>,
    /// Mean of `method_mse`.
    pub mean_mse: f64,
    /// Error of the per-sample mean map against the truth.
    pub aggregate_mse: f64,
    /// Spread of the methods around their mean; zero only when all agree.
    pub variance: f64,
}

/// `maps[j][n]` is method `j`'s map for sample `n`; `truth[n]` is the
/// reference map for sample `n`. Maps need not be normalized.
pub fn bias_variance_report(truth: &[Heatmap], maps: &[Vec<Heatmap>]) -> Result<BiasVarianceReport> {
    if truth.is_empty() || maps.is_empty() {
        return Err(Error::InvalidParameter("bias-variance report of no maps".into()));
    }
    for method in maps {
        if method.len() != truth.len() {
            return Err(Error::InvalidParameter(format!(
                "{} maps for {} reference maps",
                method.len(),
                truth.len()
            )));
        }
        for (m, t) in method.iter().zip(truth) {
            t.check_same_shape(m, "bias-variance")?;
        }
    }
    let jn = maps.len() as f64;
    let nn = truth.len() as f64;
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / a.len() as f64;

    let method_mse: Vec<f64> = maps
        .iter()
        .map(|method| method.iter().zip(truth).map(|(m, t)| sq(m.values(), t.values())).sum::<f64>() / nn)
        .collect();
    let mean_mse = method_mse.iter().sum::<f64>() / jn;

    let mut aggregate_mse = 0.0;
    let mut variance = 0.0;
    for (n, t) in truth.iter().enumerate() {
        let mean: Vec<f64> = (0..t.len())
            .map(|p| maps.iter().map(|m| m[n].values()[p]).sum::<f64>() / jn)
            .collect();
        aggregate_mse += sq(&mean, t.values()) / nn;
        variance += maps.iter().map(|m| sq(m[n].values(), &mean)).sum::<f64>() / (jn * nn);
    }
    Ok(BiasVarianceReport {
        method_mse,
        mean_mse,
        aggregate_mse,
        variance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn norm(v: &[f64]) -> Heatmap {
        Heatmap::new(1, v.len(), v.to_vec()).unwrap().normalize().unwrap()
    }

    fn raw(v: &[f64]) -> Heatmap {
        Heatmap::new(1, v.len(), v.to_vec()).unwrap()
    }

    #[test]
    fn mean_examples() {
        let a = norm(&[0.2, 0.3, 0.5]);
        assert_eq!(agg_mean(&[a.clone(), a.clone(), a.clone()]).unwrap(), a);
        let m = agg_mean(&[norm(&[1.0, 0.0]), norm(&[0.0, 1.0])]).unwrap();
        assert_eq!(m.values(), &[0.5, 0.5]);
        assert!(m.is_normalized());
    }

    #[test]
    fn inputs_are_checked() {
        let a = norm(&[1.0, 1.0]);
        assert!(agg_mean(std::slice::from_ref(&a)).is_err());
        assert!(matches!(agg_mean(&[a.clone(), raw(&[0.5, 0.5])]), Err(Error::NotNormalized)));
        assert!(matches!(
            agg_mean(&[a, norm(&[1.0, 1.0, 1.0])]),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn var_examples() {
        let a = norm(&[0.2, 0.8]);
        assert!(matches!(agg_var(&[a.clone(), a]), Err(Error::DegenerateEnsemble)));
        let v = agg_var(&[norm(&[1.0, 0.0]), norm(&[0.0, 1.0])]).unwrap();
        assert_eq!(v.values(), &[0.5, 0.5]);

        // pixel 0 agrees across members, pixels 1 and 2 do not
        let maps = [norm(&[0.4, 0.6, 0.0]), norm(&[0.4, 0.0, 0.6])];
        let mean = agg_mean(&maps).unwrap();
        let var = agg_var(&maps).unwrap();
        let want = 0.2 / (0.2 + 2.0 * 0.3 / 2.3);
        assert!((var.values()[0] - want).abs() < 1e-15);
        assert!(var.values()[0] > mean.values()[0]);
    }

    #[test]
    fn bias_variance_hand_example() {
        let r = bias_variance_report(&[raw(&[1.0])], &[vec![raw(&[0.0])], vec![raw(&[2.0])]]).unwrap();
        assert_eq!(r.mean_mse, 1.0);
        assert_eq!(r.aggregate_mse, 0.0);
        assert_eq!(r.variance, 1.0);

        let t = raw(&[0.1, 0.9]);
        let r = bias_variance_report(&[t.clone()], &[vec![t.clone()], vec![t.clone()]]).unwrap();
        assert_eq!((r.mean_mse, r.aggregate_mse, r.variance), (0.0, 0.0, 0.0));

        let off = raw(&[0.3, 0.7]);
        let r = bias_variance_report(&[t], &[vec![off.clone()], vec![off]]).unwrap();
        assert_eq!(r.variance, 0.0);
        assert_eq!(r.mean_mse, r.aggregate_mse);
        assert!(bias_variance_report(&[], &[]).is_err());
    }

    #[test]
    fn ensemble_validation() {
        assert!(Ensemble::new(vec![ExplainerSpec::Saliency], AggregationKind::Mean).is_err());
        assert!(Ensemble::new(vec![ExplainerSpec::Saliency, ExplainerSpec::Saliency], AggregationKind::Mean).is_err());
        let e: Ensemble = serde_json::from_str(r#"{"members":[{"method":"SM"},{"method":"LRP"}],"kind":"var"}"#).unwrap();
        assert_eq!(e.kind(), AggregationKind::Var);
        assert_eq!(e.name(), "AGG-Var(SM+LRP)");
        assert!(serde_json::from_str::<Ensemble>(r#"{"members":[{"method":"SM"}]}"#).is_err());
        let named: Ensemble = serde_json::from_str(r#"{"members":["sm","GB"]}"#).unwrap();
        assert_eq!(named.name(), "AGG-Mean(SM+GB)");
    }

    fn maps_strategy() -> impl Strategy<Value = Vec<Vec<f64>>> {
        (2usize..6, 2usize..6).prop_flat_map(|(j, len)| {
            proptest::collection::vec(proptest::collection::vec(0.01f64..1.0, len), j)
        })
    }

    proptest! {
        #[test]
        fn mean_is_convex_and_permutation_invariant(vals in maps_strategy()) {
            let maps: Vec<Heatmap> = vals.iter().map(|v| norm(v)).collect();
            let m = agg_mean(&maps).unwrap();
            prop_assert!((m.sum() - 1.0).abs() <= 1e-12);
            for p in 0..m.len() {
                let lo = maps.iter().map(|h| h.values()[p]).fold(f64::INFINITY, f64::min);
                let hi = maps.iter().map(|h| h.values()[p]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(m.values()[p] >= lo - 1e-15 && m.values()[p] <= hi + 1e-15);
            }
            let mut rev = maps.clone();
            rev.reverse();
            let r = agg_mean(&rev).unwrap();
            for (a, b) in m.values().iter().zip(r.values()) {
                prop_assert!((a - b).abs() <= 1e-15);
            }
        }

        #[test]
        fn aggregate_error_never_exceeds_mean_error(
            j in 2usize..6, n in 1usize..5, len in 2usize..10, seed in any::<u64>()
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut gen = || raw(&(0..len).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>());
            let truth: Vec<Heatmap> = (0..n).map(|_| gen()).collect();
            let maps: Vec<Vec<Heatmap>> = (0..j).map(|_| (0..n).map(|_| gen()).collect()).collect();
            let r = bias_variance_report(&truth, &maps).unwrap();
            prop_assert!(r.variance >= 0.0);
            prop_assert!(r.aggregate_mse <= r.mean_mse + 1e-15);
            prop_assert!((r.mean_mse - (r.aggregate_mse + r.variance)).abs() <= 1e-9 * r.mean_mse);
        }
    }
}
