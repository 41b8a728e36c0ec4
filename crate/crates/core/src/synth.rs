//! Panels with planted community structure, lagged cross-community effects
//! and known informative/irrelevant features.

use chrono::{Duration, NaiveDate};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::data::geo::{proximity_matrix, Centroid, DistanceUnit, LatLon};
use crate::data::panel::PanelDataset;
use crate::error::{Error, Result};
use crate::eval::interpret::MembershipMatrix;

/// `weight · X[t+1−lag, l, feature]` summed over every location `l` of the
/// source community.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelTerm {
    pub feature: usize,
    pub lag: usize,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub num_locations: usize,
    pub num_weeks: usize,
    pub num_features: usize,
    pub num_static: usize,
    pub communities: usize,
    /// Community of each location.
    pub assignment: Vec<usize>,
    /// `sources[c]` is the community whose activity drives targets in community `c`.
    pub sources: Vec<usize>,
    /// Lag kernel per target community.
    pub kernels: Vec<Vec<KernelTerm>>,
    /// Features that are independent noise.
    pub irrelevant: Vec<usize>,
    /// Base weekly rate per community and feature, `[K*][n]`. Irrelevant
    /// features ignore it and use `irrelevant_rate`.
    pub base_rates: Vec<Vec<f64>>,
    pub irrelevant_rate: f64,
    /// AR(1) coefficient and innovation sd of each community's log-intensity.
    pub latent_ar: f64,
    pub latent_sd: f64,
    /// Share of each target drawn as Poisson noise instead of the rounded
    /// signal; 0 gives exact targets.
    pub noise: f64,
    /// Largest admissible lag, normally the model window.
    pub window: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        // Each community's targets follow a ten-week moving sum of one
        // source community's informative counts.
        let spread = |features: &[usize]| -> Vec<KernelTerm> {
            let weight = 0.025 / features.len() as f64;
            features
                .iter()
                .flat_map(|&feature| (1..=10).map(move |lag| KernelTerm { feature, lag, weight }))
                .collect()
        };
        Self {
            num_locations: 12,
            num_weeks: 200,
            num_features: 6,
            num_static: 2,
            communities: 3,
            assignment: (0..12).map(|l| l / 4).collect(),
            sources: vec![1, 2, 0],
            kernels: vec![spread(&[1]), spread(&[0, 1]), spread(&[0])],
            irrelevant: vec![2, 3, 4, 5],
            base_rates: vec![
                vec![12.0, 2.0, 0.0, 0.0, 0.0, 0.0],
                vec![2.0, 12.0, 0.0, 0.0, 0.0, 0.0],
                vec![12.0, 12.0, 0.0, 0.0, 0.0, 0.0],
            ],
            irrelevant_rate: 6.0,
            latent_ar: 0.8,
            latent_sd: 0.2,
            noise: 0.3,
            window: 10,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let (l, n, k) = (self.num_locations, self.num_features, self.communities);
        if l == 0 || n == 0 || k == 0 || self.num_weeks == 0 {
            return bad("locations, weeks, features and communities must be positive".into());
        }
        if self.assignment.len() != l || self.assignment.iter().any(|&c| c >= k) {
            return bad(format!("assignment must map each of {l} locations to a community below {k}"));
        }
        if (0..k).any(|c| !self.assignment.contains(&c)) {
            return bad("every community needs at least one location".into());
        }
        if self.sources.len() != k || self.sources.iter().any(|&s| s >= k) {
            return bad(format!("sources must name a community for each of {k} communities"));
        }
        if self.kernels.len() != k || self.base_rates.len() != k || self.base_rates.iter().any(|r| r.len() != n) {
            return bad("kernels and base rates need one entry per community".into());
        }
        if self.irrelevant.iter().any(|&f| f >= n) {
            return bad("irrelevant feature index out of range".into());
        }
        for term in self.kernels.iter().flatten() {
            if term.feature >= n || self.irrelevant.contains(&term.feature) {
                return bad(format!("kernel feature {} must be a relevant feature index", term.feature));
            }
            if term.lag == 0 || term.lag > self.window {
                return bad(format!("kernel lag {} must lie in 1..={}", term.lag, self.window));
            }
            if !term.weight.is_finite() || term.weight < 0.0 {
                return bad("kernel weights must be finite and non-negative".into());
            }
        }
        let rates_ok = self.base_rates.iter().flatten().chain([&self.irrelevant_rate]).all(|r| r.is_finite() && *r >= 0.0);
        if !rates_ok {
            return bad("rates must be finite and non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.noise) || !(self.latent_ar.abs() < 1.0) || !(self.latent_sd >= 0.0) {
            return bad("noise must lie in [0,1], |latent_ar| < 1 and latent_sd ≥ 0".into());
        }
        Ok(())
    }

    pub fn informative_mask(&self) -> Vec<bool> {
        (0..self.num_features)
            .map(|f| self.kernels.iter().flatten().any(|t| t.feature == f))
            .collect()
    }

    fn max_lag(&self) -> usize {
        self.kernels.iter().flatten().map(|t| t.lag).max().unwrap_or(0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub communities: usize,
    pub locations: usize,
    /// `[K*×L]`, each row uniform over its community's locations.
    pub membership: Vec<f64>,
    /// `[L×K*]`, each row the indicator of the source community feeding that location.
    pub contribution: Vec<f64>,
    pub informative: Vec<bool>,
}

fn poisson<R: Rng + ?Sized>(rate: f64, rng: &mut R) -> f64 {
    if rate <= 0.0 {
        return 0.0;
    }
    Poisson::new(rate).map(|p| p.sample(rng)).unwrap_or(0.0)
}

/// Draws a panel from `spec`; the result is a pure function of the spec.
pub fn generate(spec: &SynthSpec) -> Result<(PanelDataset, GroundTruth)> {
    spec.validate()?;
    let (l, n, k, ns) = (spec.num_locations, spec.num_features, spec.communities, spec.num_static);
    let burn = spec.max_lag();
    let total = spec.num_weeks + burn;
    let mut rng = StdRng::seed_from_u64(spec.seed);
    let innovation = Normal::new(0.0, spec.latent_sd.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let stationary_var = spec.latent_sd.powi(2) / (1.0 - spec.latent_ar.powi(2));

    // Community log-intensities, started from the stationary distribution.
    let mut latent = vec![0.0; total * k];
    for c in 0..k {
        latent[c] = innovation.sample(&mut rng) / (1.0 - spec.latent_ar.powi(2)).sqrt();
    }
    for t in 1..total {
        for c in 0..k {
            latent[t * k + c] = spec.latent_ar * latent[(t - 1) * k + c] + innovation.sample(&mut rng);
        }
    }

    let mut dynamic = vec![0.0; total * l * n];
    for t in 0..total {
        for loc in 0..l {
            let c = spec.assignment[loc];
            let scale = (latent[t * k + c] - stationary_var / 2.0).exp();
            for f in 0..n {
                let rate = if spec.irrelevant.contains(&f) {
                    spec.irrelevant_rate
                } else {
                    spec.base_rates[c][f] * scale
                };
                dynamic[(t * l + loc) * n + f] = poisson(rate, &mut rng);
            }
        }
    }

    let mut targets = vec![0.0; total * l];
    for t in burn..total {
        for d in 0..l {
            let c = spec.assignment[d];
            let source = spec.sources[c];
            let mut signal = 0.0;
            for term in &spec.kernels[c] {
                let week = t - term.lag;
                for src in (0..l).filter(|&s| spec.assignment[s] == source) {
                    signal += term.weight * dynamic[(week * l + src) * n + term.feature];
                }
            }
            targets[t * l + d] = ((1.0 - spec.noise) * signal).round() + poisson(spec.noise * signal, &mut rng);
        }
    }

    // Locations scattered around community centres roughly 10 km apart.
    let centroids: Vec<Centroid> = (0..l)
        .map(|loc| {
            let c = spec.assignment[loc] as f64;
            let angle = c * std::f64::consts::TAU / k as f64;
            let position = LatLon {
                lat: 41.85 + 0.09 * angle.sin() + rng.gen_range(-0.015..0.015),
                lon: -87.65 + 0.12 * angle.cos() + rng.gen_range(-0.02..0.02),
            };
            Centroid {
                id: loc.to_string(),
                name: format!("loc{loc:02}"),
                position,
            }
        })
        .collect();
    let proximity = proximity_matrix(&centroids, DistanceUnit::Kilometers);
    let statics: Vec<f64> = (0..l * ns).map(|_| rng.gen_range(0.0..1.0)).collect();

    let week0 = NaiveDate::from_ymd_opt(2015, 1, 5).expect("valid date");
    let panel = PanelDataset {
        num_weeks: spec.num_weeks,
        num_locations: l,
        dynamic_names: (0..n)
            .map(|f| if spec.irrelevant.contains(&f) { format!("noise{f}") } else { format!("signal{f}") })
            .collect(),
        static_names: (0..ns).map(|s| format!("static{s}")).collect(),
        location_names: centroids.iter().map(|c| c.name.clone()).collect(),
        week_starts: (0..spec.num_weeks).map(|t| week0 + Duration::weeks(t as i64)).collect(),
        target_feature: None,
        distance_unit: DistanceUnit::Kilometers,
        dynamic: dynamic[burn * l * n..].to_vec(),
        statics,
        targets: targets[burn * l..].to_vec(),
        proximity,
    };
    panel.validate()?;

    let mut membership = vec![0.0; k * l];
    let mut contribution = vec![0.0; l * k];
    for c in 0..k {
        let size = spec.assignment.iter().filter(|&&a| a == c).count() as f64;
        for loc in (0..l).filter(|&loc| spec.assignment[loc] == c) {
            membership[c * l + loc] = 1.0 / size;
        }
    }
    for d in 0..l {
        contribution[d * k + spec.sources[spec.assignment[d]]] = 1.0;
    }
    Ok((
        panel,
        GroundTruth {
            communities: k,
            locations: l,
            membership,
            contribution,
            informative: spec.informative_mask(),
        },
    ))
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

fn permutations(k: usize) -> Vec<Vec<usize>> {
    fn extend(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                prefix.push(i);
                extend(prefix, used, out);
                prefix.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    extend(&mut Vec::with_capacity(k), &mut vec![false; k], &mut out);
    out
}

/// Best mean row cosine similarity between learned and planted memberships
/// over every matching of learned rows to planted rows.
pub fn score_recovery(membership: &MembershipMatrix, truth: &GroundTruth) -> Result<f64> {
    let (k, l) = (truth.communities, truth.locations);
    if membership.communities != k || membership.locations != l {
        return Err(Error::contract(format!(
            "membership is {}×{} but the planted structure is {k}×{l}",
            membership.communities, membership.locations
        )));
    }
    if k == 0 {
        return Err(Error::contract("recovery needs at least one community"));
    }
    let truth_row = |c: usize| &truth.membership[c * l..(c + 1) * l];
    let best = permutations(k)
        .into_iter()
        .map(|perm| (0..k).map(|c| cosine(membership.row(perm[c]), truth_row(c))).sum::<f64>() / k as f64)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(best.clamp(0.0, 1.0))
}
