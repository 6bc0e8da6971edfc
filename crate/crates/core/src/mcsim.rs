//! Finite-population Monte Carlo check of the continuum dynamics.
//!
//! Agents of one type are exchangeable once thresholds are fixed, so the
//! process is a continuous-time Markov chain on per-type head counts and is
//! simulated with the Gillespie direct method.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use rayon::prelude::*;
use serde::Serialize;
use statrs::statistics::Statistics;

use crate::error::{Error, Result};
use crate::market::{AssortmentSet, MarketSpec, Side};

pub const RNG_NAME: &str = "chacha8";
pub const DEFAULT_BATCHES: usize = 20;

#[derive(Debug, Clone, Serialize)]
pub struct SimConfig {
    /// Agents per unit of mass.
    pub scale: f64,
    pub horizon: f64,
    pub burn_in: f64,
    pub seed: u64,
    /// Batches used for batch-means standard errors.
    pub batches: usize,
}

impl SimConfig {
    pub fn new(scale: f64, horizon: f64, burn_in: f64, seed: u64) -> Self {
        SimConfig {
            scale,
            horizon,
            burn_in,
            seed,
            batches: DEFAULT_BATCHES,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale >= 1.0 && self.scale.is_finite()) {
            return Err(Error::validation("scale N must be at least 1"));
        }
        if !(self.burn_in >= 0.0 && self.burn_in < self.horizon && self.horizon.is_finite()) {
            return Err(Error::validation("need 0 <= burn_in < horizon"));
        }
        if self.batches < 2 {
            return Err(Error::validation("need at least two batches"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Serialize, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub stderr: f64,
}

impl Estimate {
    fn from_samples(xs: &[f64]) -> Self {
        let value = xs.mean();
        let stderr = if xs.len() > 1 {
            xs.std_dev() / (xs.len() as f64).sqrt()
        } else {
            f64::NAN
        };
        Estimate { value, stderr }
    }

    /// Whether `target` lies within `k` standard errors.
    pub fn covers(&self, target: f64, k: f64) -> bool {
        (self.value - target).abs() <= k * self.stderr
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TypeStats {
    pub label: String,
    pub side: Side,
    pub mass: Estimate,
    pub arrivals: u64,
    pub matched_exits: u64,
    pub life_exits: u64,
    pub final_population: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SimReport {
    pub seed: u64,
    pub rng: &'static str,
    pub config: SimConfig,
    pub types: Vec<TypeStats>,
    /// Utility flow per unit mass, both sides counted.
    pub welfare: Estimate,
    pub matches: u64,
    pub departures: u64,
    pub meetings: u64,
    pub rejected_meetings: u64,
    /// Meetings drawn while one of the two types had nobody present.
    pub empty_side_skips: u64,
    pub events: u64,
    /// Per pair `[m][w]`: time-integrated `n_m λ_m(w) − n_w λ_w(m)` relative
    /// to the integrated meeting rate.
    pub meeting_asymmetry: Vec<Vec<f64>>,
}

impl SimReport {
    pub fn matched_exits(&self, side: Side) -> u64 {
        self.types
            .iter()
            .filter(|t| t.side == side)
            .map(|t| t.matched_exits)
            .sum()
    }

    /// Integer flow accounting: every arrival is matched, leaves, or is still present.
    pub fn accounting_holds(&self) -> bool {
        let per_type = self
            .types
            .iter()
            .all(|t| t.arrivals == t.matched_exits + t.life_exits + t.final_population);
        let arrivals: u64 = self.types.iter().map(|t| t.arrivals).sum();
        let present: u64 = self.types.iter().map(|t| t.final_population).sum();
        per_type
            && arrivals == 2 * self.matches + self.departures + present
            && self.matched_exits(Side::Men) == self.matches
            && self.matched_exits(Side::Women) == self.matches
    }
}

struct Pair {
    m: usize,
    w: usize,
    node_m: usize,
    node_w: usize,
    lambda_m: f64,
    lambda_w: f64,
    cutoff: f64,
}

/// Window accumulators for one batch.
#[derive(Clone)]
struct Batch {
    mass_time: Vec<f64>,
    utility: f64,
}

/// Run one replication. Each ordered pair of types carries a meeting clock at
/// rate `½ n_θ λ_θ(θ′)`, so one meeting is one event seen from both sides and
/// the expected meeting rate of each agent matches the continuum.
pub fn simulate(
    spec: &MarketSpec,
    assortments: &AssortmentSet,
    thresholds: &[f64],
    config: &SimConfig,
) -> Result<SimReport> {
    config.validate()?;
    assortments.validate(spec)?;
    let n_types = spec.n_types();
    if thresholds.len() != n_types || thresholds.iter().any(|t| t.is_nan()) {
        return Err(Error::validation(format!(
            "expected {n_types} thresholds"
        )));
    }
    let scale = config.scale;
    let arrival: Vec<f64> = (0..n_types)
        .map(|k| {
            let (side, i) = spec.node_type(k);
            spec.arrival(side, i) * scale
        })
        .collect();
    let total_arrival: f64 = arrival.iter().sum();
    let mut pairs = Vec::new();
    for m in 0..spec.n_men() {
        for w in 0..spec.n_women() {
            let lambda_m = assortments.men[m][w];
            let lambda_w = assortments.women[w][m];
            if lambda_m > 0.0 || lambda_w > 0.0 {
                let node_m = spec.node(Side::Men, m);
                let node_w = spec.node(Side::Women, w);
                pairs.push(Pair {
                    m,
                    w,
                    node_m,
                    node_w,
                    lambda_m: 0.5 * lambda_m,
                    lambda_w: 0.5 * lambda_w,
                    cutoff: thresholds[node_m].max(thresholds[node_w]),
                });
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut count = vec![0u64; n_types];
    let mut arrivals = vec![0u64; n_types];
    let mut matched = vec![0u64; n_types];
    let mut life = vec![0u64; n_types];
    let (mut meetings, mut rejected, mut skips, mut events) = (0u64, 0u64, 0u64, 0u64);
    let window = config.horizon - config.burn_in;
    let width = window / config.batches as f64;
    let mut batches = vec![
        Batch {
            mass_time: vec![0.0; n_types],
            utility: 0.0,
        };
        config.batches
    ];
    let mut asym = vec![vec![(0.0, 0.0); spec.n_women()]; spec.n_men()];
    let batch_of = |t: f64| (((t - config.burn_in) / width) as usize).min(config.batches - 1);

    let mut t = 0.0;
    loop {
        let population: u64 = count.iter().sum();
        let life_rate = spec.delta * population as f64;
        let mut meet_rate = 0.0;
        for p in &pairs {
            meet_rate += p.lambda_m * count[p.node_m] as f64 + p.lambda_w * count[p.node_w] as f64;
        }
        let total = total_arrival + life_rate + meet_rate;
        let dt: f64 = rng.sample::<f64, _>(Exp1) / total;
        let end = (t + dt).min(config.horizon);

        // Integrate head counts over the part of [t, end] after burn-in.
        let mut a = t.max(config.burn_in);
        while a < end {
            let b_idx = batch_of(a);
            let edge = (config.burn_in + (b_idx + 1) as f64 * width).min(end);
            if edge <= a {
                break;
            }
            for (acc, &c) in batches[b_idx].mass_time.iter_mut().zip(&count) {
                *acc += c as f64 * (edge - a);
            }
            a = edge;
        }
        if t >= config.burn_in {
            for p in &pairs {
                let (x, y) = (
                    p.lambda_m * count[p.node_m] as f64 * dt.min(config.horizon - t),
                    p.lambda_w * count[p.node_w] as f64 * dt.min(config.horizon - t),
                );
                let cell = &mut asym[p.m][p.w];
                cell.0 += x - y;
                cell.1 += x + y;
            }
        }
        if t + dt >= config.horizon {
            break;
        }
        t += dt;
        events += 1;

        let mut r = rng.random::<f64>() * total;
        if r < total_arrival {
            let k = pick(&arrival, &mut r);
            count[k] += 1;
            arrivals[k] += 1;
            continue;
        }
        r -= total_arrival;
        if r < life_rate {
            let mut k = count.iter().rposition(|&c| c > 0).expect("someone present");
            for (j, &c) in count.iter().enumerate() {
                let w = c as f64 * spec.delta;
                if r < w {
                    k = j;
                    break;
                }
                r -= w;
            }
            count[k] -= 1;
            life[k] += 1;
            continue;
        }
        r -= life_rate;
        let mut chosen = pairs.len() - 1;
        for (idx, p) in pairs.iter().enumerate() {
            let rate = p.lambda_m * count[p.node_m] as f64 + p.lambda_w * count[p.node_w] as f64;
            if r < rate {
                chosen = idx;
                break;
            }
            r -= rate;
        }
        let p = &pairs[chosen];
        if count[p.node_m] == 0 || count[p.node_w] == 0 {
            skips += 1;
            if skips == 1 {
                tracing::warn!(pair = chosen, t, "meeting drawn with an empty side; skipped");
            }
            continue;
        }
        meetings += 1;
        let u = spec.dist[p.m][p.w].sample(&mut rng);
        if u >= p.cutoff {
            count[p.node_m] -= 1;
            count[p.node_w] -= 1;
            matched[p.node_m] += 1;
            matched[p.node_w] += 1;
            if t >= config.burn_in {
                batches[batch_of(t)].utility += 2.0 * u;
            }
        } else {
            rejected += 1;
        }
    }

    let types = (0..n_types)
        .map(|k| {
            let (side, i) = spec.node_type(k);
            let samples: Vec<f64> = batches
                .iter()
                .map(|b| b.mass_time[k] / width / scale)
                .collect();
            TypeStats {
                label: spec.types(side)[i].label.clone(),
                side,
                mass: Estimate::from_samples(&samples),
                arrivals: arrivals[k],
                matched_exits: matched[k],
                life_exits: life[k],
                final_population: count[k],
            }
        })
        .collect();
    let welfare_samples: Vec<f64> = batches.iter().map(|b| b.utility / width / scale).collect();
    let matches = matched[..spec.n_men()].iter().sum();
    Ok(SimReport {
        seed: config.seed,
        rng: RNG_NAME,
        config: config.clone(),
        types,
        welfare: Estimate::from_samples(&welfare_samples),
        matches,
        departures: life.iter().sum(),
        meetings,
        rejected_meetings: rejected,
        empty_side_skips: skips,
        events,
        meeting_asymmetry: asym
            .iter()
            .map(|row| {
                row.iter()
                    .map(|&(d, s)| if s > 0.0 { d / s } else { 0.0 })
                    .collect()
            })
            .collect(),
    })
}

fn pick(weights: &[f64], r: &mut f64) -> usize {
    for (k, &w) in weights.iter().enumerate() {
        if *r < w {
            return k;
        }
        *r -= w;
    }
    // Rounding can leave a sliver past the last bucket.
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// Replications for consecutive seeds starting at `config.seed`, run in
/// parallel and returned in seed order.
pub fn replicate(
    spec: &MarketSpec,
    assortments: &AssortmentSet,
    thresholds: &[f64],
    config: &SimConfig,
    replications: usize,
) -> Result<Vec<SimReport>> {
    (0..replications as u64)
        .into_par_iter()
        .map(|r| {
            let cfg = SimConfig {
                seed: config.seed.wrapping_add(r),
                ..config.clone()
            };
            simulate(spec, assortments, thresholds, &cfg)
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct Pooled {
    pub labels: Vec<String>,
    /// Mean over replications with the standard error of that mean.
    pub mass: Vec<Estimate>,
    pub welfare: Estimate,
}

/// Pool replications by treating each run's window average as one sample.
/// A single run keeps its batch-means estimates.
pub fn pool(reports: &[SimReport]) -> Pooled {
    if let [only] = reports {
        return Pooled {
            labels: only.types.iter().map(|t| t.label.clone()).collect(),
            mass: only.types.iter().map(|t| t.mass).collect(),
            welfare: only.welfare,
        };
    }
    let n_types = reports.first().map_or(0, |r| r.types.len());
    let mass = (0..n_types)
        .map(|k| {
            let xs: Vec<f64> = reports.iter().map(|r| r.types[k].mass.value).collect();
            Estimate::from_samples(&xs)
        })
        .collect();
    let ws: Vec<f64> = reports.iter().map(|r| r.welfare.value).collect();
    Pooled {
        labels: reports
            .first()
            .map(|r| r.types.iter().map(|t| t.label.clone()).collect())
            .unwrap_or_default(),
        mass,
        welfare: Estimate::from_samples(&ws),
    }
}
