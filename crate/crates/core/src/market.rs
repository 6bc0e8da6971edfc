//! Market model, JSON spec files and the stock market generators.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dist::UtilityDist;
use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Men,
    Women,
}

impl Side {
    pub fn opposite(self) -> Side {
        match self {
            Side::Men => Side::Women,
            Side::Women => Side::Men,
        }
    }
}

/// A type of agent, identified by side and 0-based index.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TypeId {
    pub side: Side,
    pub index: usize,
    pub label: String,
}

impl fmt::Display for TypeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TypeInfo {
    pub label: String,
    pub arrival: f64,
}

impl TypeInfo {
    pub fn new(label: impl Into<String>, arrival: f64) -> Self {
        TypeInfo {
            label: label.into(),
            arrival,
        }
    }
}

/// A validated market: types on both sides, arrival rates, the life-event
/// rate and a utility law for every cross pair (`dist[man][woman]`).
#[derive(Debug, Clone, PartialEq)]
pub struct MarketSpec {
    pub delta: f64,
    pub men: Vec<TypeInfo>,
    pub women: Vec<TypeInfo>,
    pub dist: Vec<Vec<UtilityDist>>,
}

impl MarketSpec {
    /// Builds and validates a market.
    pub fn new(
        delta: f64,
        men: Vec<TypeInfo>,
        women: Vec<TypeInfo>,
        dist: Vec<Vec<UtilityDist>>,
    ) -> Result<Self> {
        let spec = MarketSpec {
            delta,
            men,
            women,
            dist,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn n_men(&self) -> usize {
        self.men.len()
    }

    pub fn n_women(&self) -> usize {
        self.women.len()
    }

    pub fn n_types(&self) -> usize {
        self.men.len() + self.women.len()
    }

    pub fn types(&self, side: Side) -> &[TypeInfo] {
        match side {
            Side::Men => &self.men,
            Side::Women => &self.women,
        }
    }

    pub fn arrival(&self, side: Side, i: usize) -> f64 {
        self.types(side)[i].arrival
    }

    pub fn type_id(&self, side: Side, index: usize) -> TypeId {
        TypeId {
            side,
            index,
            label: self.types(side)[index].label.clone(),
        }
    }

    /// Utility law between type `i` on `side` and type `j` on the other side.
    pub fn pair_dist(&self, side: Side, i: usize, j: usize) -> &UtilityDist {
        match side {
            Side::Men => &self.dist[i][j],
            Side::Women => &self.dist[j][i],
        }
    }

    /// Global node index: men first, then women.
    pub fn node(&self, side: Side, i: usize) -> usize {
        match side {
            Side::Men => i,
            Side::Women => self.men.len() + i,
        }
    }

    pub fn node_type(&self, node: usize) -> (Side, usize) {
        if node < self.men.len() {
            (Side::Men, node)
        } else {
            (Side::Women, node - self.men.len())
        }
    }

    pub fn find_label(&self, label: &str) -> Option<(Side, usize)> {
        self.men
            .iter()
            .position(|t| t.label == label)
            .map(|i| (Side::Men, i))
            .or_else(|| {
                self.women
                    .iter()
                    .position(|t| t.label == label)
                    .map(|i| (Side::Women, i))
            })
    }

    /// Same market with every arrival rate multiplied by `k`.
    pub fn scale_arrivals(&self, k: f64) -> MarketSpec {
        let mut out = self.clone();
        for t in out.men.iter_mut().chain(out.women.iter_mut()) {
            t.arrival *= k;
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta.is_finite() && self.delta > 0.0) {
            return Err(Error::validation("delta must be positive"));
        }
        if self.men.is_empty() || self.women.is_empty() {
            return Err(Error::validation("each side needs at least one type"));
        }
        let mut seen = HashSet::new();
        for t in self.men.iter().chain(&self.women) {
            if t.label.is_empty() {
                return Err(Error::validation("type labels must be nonempty"));
            }
            if !seen.insert(t.label.as_str()) {
                return Err(Error::validation(format!("duplicate type label `{}`", t.label)));
            }
            if !(t.arrival.is_finite() && t.arrival > 0.0) {
                return Err(Error::validation(format!(
                    "arrival of `{}` must be positive (got {})",
                    t.label, t.arrival
                )));
            }
        }
        if self.dist.len() != self.men.len()
            || self.dist.iter().any(|row| row.len() != self.women.len())
        {
            return Err(Error::validation(
                "dist must hold one entry per (man, woman) pair",
            ));
        }
        for (i, row) in self.dist.iter().enumerate() {
            for (j, d) in row.iter().enumerate() {
                d.validate().map_err(|e| {
                    Error::validation(format!(
                        "dist for pair ({}, {}): {}",
                        self.men[i].label,
                        self.women[j].label,
                        strip_prefix(&e)
                    ))
                })?;
            }
        }
        Ok(())
    }
}

fn strip_prefix(e: &Error) -> String {
    match e {
        Error::Validation(m) => m.clone(),
        other => other.to_string(),
    }
}

/// Meeting rates `λ_θ(θ′)`: `men[m][w]` is the rate at which a man of type `m`
/// meets women of type `w`, and `women[w][m]` the reverse.
#[derive(Debug, Clone, PartialEq)]
pub struct AssortmentSet {
    pub men: Vec<Vec<f64>>,
    pub women: Vec<Vec<f64>>,
}

impl AssortmentSet {
    pub fn zeros(n_men: usize, n_women: usize) -> Self {
        AssortmentSet {
            men: vec![vec![0.0; n_women]; n_men],
            women: vec![vec![0.0; n_men]; n_women],
        }
    }

    pub fn for_market(spec: &MarketSpec) -> Self {
        Self::zeros(spec.n_men(), spec.n_women())
    }

    pub fn rate(&self, side: Side, i: usize, j: usize) -> f64 {
        match side {
            Side::Men => self.men[i][j],
            Side::Women => self.women[i][j],
        }
    }

    pub fn set(&mut self, side: Side, i: usize, j: usize, rate: f64) {
        match side {
            Side::Men => self.men[i][j] = rate,
            Side::Women => self.women[i][j] = rate,
        }
    }

    pub fn row(&self, side: Side, i: usize) -> &[f64] {
        match side {
            Side::Men => &self.men[i],
            Side::Women => &self.women[i],
        }
    }

    pub fn validate(&self, spec: &MarketSpec) -> Result<()> {
        let shape_ok = self.men.len() == spec.n_men()
            && self.women.len() == spec.n_women()
            && self.men.iter().all(|r| r.len() == spec.n_women())
            && self.women.iter().all(|r| r.len() == spec.n_men());
        if !shape_ok {
            return Err(Error::validation("assortment shape does not match the market"));
        }
        for side in [Side::Men, Side::Women] {
            for i in 0..spec.types(side).len() {
                for (j, &r) in self.row(side, i).iter().enumerate() {
                    if !(r.is_finite() && r >= 0.0) {
                        return Err(Error::validation(format!(
                            "rate {} -> {} must be finite and nonnegative (got {r})",
                            spec.types(side)[i].label,
                            spec.types(side.opposite())[j].label
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Pair meeting flows `γ[m][w] = m_m·λ_m(w)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairFlow {
    pub gamma: Vec<Vec<f64>>,
}

impl PairFlow {
    pub fn zeros(n_men: usize, n_women: usize) -> Self {
        PairFlow {
            gamma: vec![vec![0.0; n_women]; n_men],
        }
    }

    /// Flow seen from type `i` on `side` towards type `j` opposite.
    pub fn get(&self, side: Side, i: usize, j: usize) -> f64 {
        match side {
            Side::Men => self.gamma[i][j],
            Side::Women => self.gamma[j][i],
        }
    }
}

// ---------------------------------------------------------------------------
// File formats

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MarketFile {
    version: u32,
    delta: f64,
    men: Vec<TypeInfo>,
    women: Vec<TypeInfo>,
    dist: Vec<DistEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DistEntry {
    man: String,
    woman: String,
    d: UtilityDist,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AssortmentFile {
    version: u32,
    lambda: Vec<LambdaEntry>,
}

/// One directed meeting rate, addressed by type labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LambdaEntry {
    pub from: String,
    pub to: String,
    pub rate: f64,
}

/// Deserializes JSON, reporting the offending field path on failure.
pub(crate) fn from_json_with_path<T: serde::de::DeserializeOwned>(text: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| Error::Schema {
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })
}

fn check_version(v: u32) -> Result<()> {
    if v != SCHEMA_VERSION {
        return Err(Error::Schema {
            path: "version".into(),
            message: format!("unsupported schema version {v} (expected {SCHEMA_VERSION})"),
        });
    }
    Ok(())
}

pub fn parse_market(text: &str) -> Result<MarketSpec> {
    let file: MarketFile = from_json_with_path(text)?;
    check_version(file.version)?;
    if !(file.delta.is_finite() && file.delta > 0.0) {
        return Err(Error::validation("delta must be positive"));
    }
    let mut index = HashMap::new();
    for (i, t) in file.men.iter().enumerate() {
        index.insert(t.label.clone(), (Side::Men, i));
    }
    for (j, t) in file.women.iter().enumerate() {
        if index.insert(t.label.clone(), (Side::Women, j)).is_some() {
            return Err(Error::validation(format!("duplicate type label `{}`", t.label)));
        }
    }
    let mut cells: Vec<Vec<Option<UtilityDist>>> = vec![vec![None; file.women.len()]; file.men.len()];
    for (k, entry) in file.dist.into_iter().enumerate() {
        let m = match index.get(&entry.man) {
            Some((Side::Men, i)) => *i,
            _ => {
                return Err(Error::validation(format!(
                    "dist[{k}].man `{}` is not a type on the men side",
                    entry.man
                )))
            }
        };
        let w = match index.get(&entry.woman) {
            Some((Side::Women, j)) => *j,
            _ => {
                return Err(Error::validation(format!(
                    "dist[{k}].woman `{}` is not a type on the women side",
                    entry.woman
                )))
            }
        };
        if cells[m][w].replace(entry.d).is_some() {
            return Err(Error::validation(format!(
                "duplicate dist entry for pair ({}, {})",
                entry.man, entry.woman
            )));
        }
    }
    let mut dist = Vec::with_capacity(file.men.len());
    for (i, row) in cells.into_iter().enumerate() {
        let mut out = Vec::with_capacity(row.len());
        for (j, cell) in row.into_iter().enumerate() {
            match cell {
                Some(d) => out.push(d),
                None => {
                    return Err(Error::validation(format!(
                        "missing dist entry for pair ({}, {})",
                        file.men[i].label, file.women[j].label
                    )))
                }
            }
        }
        dist.push(out);
    }
    MarketSpec::new(file.delta, file.men, file.women, dist)
}

pub fn market_to_json(spec: &MarketSpec) -> String {
    let mut dist = Vec::new();
    for (i, row) in spec.dist.iter().enumerate() {
        for (j, d) in row.iter().enumerate() {
            dist.push(DistEntry {
                man: spec.men[i].label.clone(),
                woman: spec.women[j].label.clone(),
                d: d.clone(),
            });
        }
    }
    let file = MarketFile {
        version: SCHEMA_VERSION,
        delta: spec.delta,
        men: spec.men.clone(),
        women: spec.women.clone(),
        dist,
    };
    let mut s = serde_json::to_string_pretty(&file).expect("market serializes");
    s.push('\n');
    s
}

pub fn load_market(path: impl AsRef<Path>) -> Result<MarketSpec> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_market(&text)
}

pub fn save_market(spec: &MarketSpec, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, market_to_json(spec)).map_err(|e| Error::io(path, e))
}

pub fn parse_assortments(spec: &MarketSpec, text: &str) -> Result<AssortmentSet> {
    let file: AssortmentFile = from_json_with_path(text)?;
    check_version(file.version)?;
    assortments_from_entries(spec, &file.lambda)
}

pub fn assortments_from_entries(spec: &MarketSpec, entries: &[LambdaEntry]) -> Result<AssortmentSet> {
    let mut set = AssortmentSet::for_market(spec);
    for (k, e) in entries.iter().enumerate() {
        let (fs, fi) = spec.find_label(&e.from).ok_or_else(|| {
            Error::validation(format!("lambda[{k}].from: unknown type `{}`", e.from))
        })?;
        let (ts, tj) = spec.find_label(&e.to).ok_or_else(|| {
            Error::validation(format!("lambda[{k}].to: unknown type `{}`", e.to))
        })?;
        if fs == ts {
            return Err(Error::validation(format!(
                "lambda[{k}]: `{}` and `{}` are on the same side",
                e.from, e.to
            )));
        }
        set.set(fs, fi, tj, e.rate);
    }
    set.validate(spec)?;
    Ok(set)
}

/// Positive entries of an assortment, men rows first.
pub fn assortment_entries(spec: &MarketSpec, set: &AssortmentSet) -> Vec<LambdaEntry> {
    let mut lambda = Vec::new();
    for side in [Side::Men, Side::Women] {
        for i in 0..spec.types(side).len() {
            for (j, &rate) in set.row(side, i).iter().enumerate() {
                if rate > 0.0 {
                    lambda.push(LambdaEntry {
                        from: spec.types(side)[i].label.clone(),
                        to: spec.types(side.opposite())[j].label.clone(),
                        rate,
                    });
                }
            }
        }
    }
    lambda
}

pub fn assortments_to_json(spec: &MarketSpec, set: &AssortmentSet) -> String {
    let mut s = serde_json::to_string_pretty(&AssortmentFile {
        version: SCHEMA_VERSION,
        lambda: assortment_entries(spec, set),
    })
    .expect("assortments serialize");
    s.push('\n');
    s
}

pub fn load_assortments(spec: &MarketSpec, path: impl AsRef<Path>) -> Result<AssortmentSet> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_assortments(spec, &text)
}

// ---------------------------------------------------------------------------
// Generators

fn labelled(prefix: &str, arrivals: &[f64]) -> Vec<TypeInfo> {
    arrivals
        .iter()
        .enumerate()
        .map(|(i, &a)| TypeInfo::new(format!("{prefix}{}", i + 1), a))
        .collect()
}

/// `n` types per side with unit arrivals; only same-index pairs have value.
pub fn gen_horizontal(n: usize, delta: f64, diag: UtilityDist, noise: f64) -> Result<MarketSpec> {
    if n == 0 {
        return Err(Error::validation("horizontal market needs n >= 1"));
    }
    let dist = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    if i == j {
                        diag.clone()
                    } else {
                        UtilityDist::point_mass(0.0, noise)
                    }
                })
                .collect()
        })
        .collect();
    MarketSpec::new(
        delta,
        labelled("m", &vec![1.0; n]),
        labelled("w", &vec![1.0; n]),
        dist,
    )
}

pub const INTERPOLATED_MEN: [f64; 4] = [1.0, 4.0, 4.0, 1.0];
pub const INTERPOLATED_WOMEN: [f64; 4] = [2.0, 2.0, 3.0, 2.0];

/// Mean utility of pair `(i, j)` (1-based) in the interpolated market.
pub fn interpolated_mean(q: f64, i: usize, j: usize) -> f64 {
    let horizontal = if i == j { 8.0 } else { 0.0 };
    let vertical = ((5 - i) * (5 - j)) as f64;
    (1.0 - q) * horizontal + q * vertical
}

/// The 4×4 normal market blending a horizontal and a vertical extreme.
pub fn gen_interpolated(q: f64, sigma: f64, delta: f64) -> Result<MarketSpec> {
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::validation(format!("q must lie in [0, 1] (got {q})")));
    }
    if !(sigma > 0.0) {
        return Err(Error::validation("sigma must be positive"));
    }
    let dist = (1..=4)
        .map(|i| {
            (1..=4)
                .map(|j| UtilityDist::normal(interpolated_mean(q, i, j), sigma))
                .collect()
        })
        .collect();
    MarketSpec::new(
        delta,
        labelled("m", &INTERPOLATED_MEN),
        labelled("w", &INTERPOLATED_WOMEN),
        dist,
    )
}

/// High/low vertical market with scarce high women and scarce low men.
pub fn gen_vertical_example(ubar: f64, eps: f64, delta: f64, noise: f64) -> Result<MarketSpec> {
    let pm = |v: f64| UtilityDist::point_mass(v, noise);
    MarketSpec::new(
        delta,
        vec![TypeInfo::new("mH", 1.0), TypeInfo::new("mL", 1.0 / ubar)],
        vec![TypeInfo::new("wH", 1.0 / ubar), TypeInfo::new("wL", 1.0)],
        vec![
            vec![pm(ubar * (1.0 + 2.0 * eps)), pm(1.0 + eps)],
            vec![pm(ubar), pm(1.0)],
        ],
    )
}

/// One man type facing a rare high type and a plentiful low type, with
/// `ε′ = ε/3` setting both the rare arrival rate and the friction.
pub fn gen_gap_example(eps: f64, noise: f64) -> Result<MarketSpec> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::validation(format!("epsilon must lie in (0, 1) (got {eps})")));
    }
    let e = eps / 3.0;
    MarketSpec::new(
        e,
        vec![TypeInfo::new("m", 2.0)],
        vec![TypeInfo::new("wH", e), TypeInfo::new("wL", 2.0 - e)],
        vec![vec![
            UtilityDist::point_mass(1.0 / e, noise),
            UtilityDist::point_mass(0.5, noise),
        ]],
    )
}

/// Center on the men side, one woman type per leaf.
pub fn gen_star(
    delta: f64,
    center_arrival: f64,
    leaves: &[(f64, UtilityDist)],
) -> Result<MarketSpec> {
    let arrivals: Vec<f64> = leaves.iter().map(|l| l.0).collect();
    MarketSpec::new(
        delta,
        vec![TypeInfo::new("m1", center_arrival)],
        labelled("w", &arrivals),
        vec![leaves.iter().map(|l| l.1.clone()).collect()],
    )
}
