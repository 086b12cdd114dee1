//! Ground-truth structural causal model generator.
//!
//! Each feature is a linear function of its parents plus a daily profile and
//! AR(1) noise; the target passes a linear predictor of its parents through a
//! softplus link. The target mechanism has no per-domain parameters, so
//! `P(Y | parents)` is identical across domains by construction. Edges with a
//! `per_domain` coefficient list change strength (and possibly sign) between
//! domains; these make a feature spurious.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ingest::{parse_timestamp, WorkCalendar};
use super::{DomainDataset, STEP_SECONDS};
use crate::autodiff::Tensor;
use crate::rng::{derive_seed, seeded, Rng};
use crate::{stats, Error, Result};

/// Ground-truth label of a feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    InvariantParent,
    ProxyParent,
    Child,
    Spouse,
    Spurious,
    Noise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    #[default]
    Linear,
    /// Work-hours indicator from the default calendar; takes no parents.
    Calendar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Gaussian,
    #[default]
    Uniform,
    Laplace,
}

/// Stationary AR(1) noise with marginal standard deviation `scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub scale: f64,
    pub ar: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            kind: NoiseKind::Uniform,
            scale: 1.0,
            ar: 0.0,
        }
    }
}

impl NoiseSpec {
    fn new(kind: NoiseKind, scale: f64, ar: f64) -> Self {
        Self { kind, scale, ar }
    }

    /// Unit-variance innovation.
    fn draw(&self, rng: &mut Rng) -> f64 {
        match self.kind {
            NoiseKind::Gaussian => Normal::new(0.0, 1.0).expect("valid").sample(rng),
            NoiseKind::Uniform => rng.random_range(-3f64.sqrt()..3f64.sqrt()),
            NoiseKind::Laplace => {
                let u: f64 = rng.random_range(-0.5..0.5);
                -u.signum() * (1.0 - 2.0 * u.abs()).max(f64::MIN_POSITIVE).ln() / 2f64.sqrt()
            }
        }
    }
}

/// Linear contribution of a parent. A non-empty `per_domain` list overrides
/// `coef` in domain `e` with `per_domain[e % len]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub from: String,
    #[serde(default)]
    pub coef: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_domain: Vec<f64>,
}

impl Edge {
    pub fn fixed(from: &str, coef: f64) -> Self {
        Self {
            from: from.into(),
            coef,
            per_domain: Vec::new(),
        }
    }

    pub fn varying(from: &str, per_domain: Vec<f64>) -> Self {
        Self {
            from: from.into(),
            coef: 0.0,
            per_domain,
        }
    }

    fn coef_in(&self, e: usize) -> f64 {
        if self.per_domain.is_empty() {
            self.coef
        } else {
            self.per_domain[e % self.per_domain.len()]
        }
    }

    /// True when the coefficient differs between domains.
    pub fn is_varying(&self) -> bool {
        self.per_domain.windows(2).any(|w| w[0] != w[1])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub name: String,
    pub role: Role,
    #[serde(default)]
    pub kind: NodeKind,
    #[serde(default)]
    pub parents: Vec<Edge>,
    #[serde(default)]
    pub noise: NoiseSpec,
    /// Amplitude of a 24-hour sinusoid peaking mid-afternoon.
    #[serde(default)]
    pub daily: f64,
    /// Amplitude of a daylight bump (positive between 06:00 and 18:00).
    #[serde(default)]
    pub daylight: f64,
    /// Per-domain additive shift, cycled.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub offsets: Vec<f64>,
    /// Per-domain multiplier of the noise scale, cycled.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub noise_scales: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LinkFn {
    Identity,
    #[default]
    Softplus,
}

impl LinkFn {
    fn apply(self, v: f64) -> f64 {
        match self {
            LinkFn::Identity => v,
            LinkFn::Softplus => {
                if v > 30.0 {
                    v
                } else {
                    v.exp().ln_1p()
                }
            }
        }
    }

    /// Inverse link, for recovering the linear predictor.
    pub fn inverse(self, y: f64) -> f64 {
        match self {
            LinkFn::Identity => y,
            LinkFn::Softplus => {
                if y > 30.0 {
                    y
                } else {
                    y.exp_m1().ln()
                }
            }
        }
    }
}

/// The target mechanism. It has no per-domain parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSpec {
    pub name: String,
    #[serde(default)]
    pub intercept: f64,
    pub parents: Vec<Edge>,
    #[serde(default)]
    pub noise: NoiseSpec,
    #[serde(default)]
    pub link: LinkFn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScmSpec {
    pub nodes: Vec<NodeSpec>,
    pub target: TargetSpec,
    /// ISO-8601 start of every domain's series.
    #[serde(default = "default_start")]
    pub start: String,
    #[serde(default = "default_step")]
    pub step_seconds: i64,
    /// Per-domain multiplier of the row count, cycled.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub size_factors: Vec<f64>,
}

fn default_start() -> String {
    "2024-01-01T00:00:00".into()
}

fn default_step() -> i64 {
    STEP_SECONDS
}

impl Default for ScmSpec {
    /// Eight features: two invariant parents (outdoor temperature and the
    /// work calendar), a proxy parent (light), a child (indoor temperature)
    /// and its other parent (humidity), two spurious features whose link to
    /// the target changes strength and sign across domains (TVOC, pressure)
    /// and one pure-noise feature (CO2).
    fn default() -> Self {
        use NoiseKind::*;
        let node = |name: &str, role: Role| NodeSpec {
            name: name.into(),
            role,
            kind: NodeKind::Linear,
            parents: Vec::new(),
            noise: NoiseSpec::default(),
            daily: 0.0,
            daylight: 0.0,
            offsets: Vec::new(),
            noise_scales: Vec::new(),
        };
        let nodes = vec![
            NodeSpec {
                noise: NoiseSpec::new(Uniform, 1.0, 0.98),
                daily: 1.0,
                offsets: vec![0.0, 1.5, -1.0, 2.5, -2.0, 0.5],
                noise_scales: vec![1.0, 1.3, 0.8, 1.1, 0.9, 1.2],
                ..node("outdoor_temperature", Role::InvariantParent)
            },
            NodeSpec {
                kind: NodeKind::Calendar,
                ..node("is_work", Role::InvariantParent)
            },
            NodeSpec {
                parents: vec![Edge::fixed("is_work", 0.8)],
                noise: NoiseSpec::new(Laplace, 0.3, 0.5),
                daylight: 0.6,
                ..node("indoor_light", Role::ProxyParent)
            },
            NodeSpec {
                noise: NoiseSpec::new(Uniform, 1.0, 0.95),
                offsets: vec![0.0, -1.0, 1.0, 0.5, -0.5, 0.0],
                ..node("indoor_humidity", Role::Spouse)
            },
            NodeSpec {
                parents: vec![Edge::fixed("energy", 0.8), Edge::fixed("indoor_humidity", 0.4)],
                noise: NoiseSpec::new(Laplace, 0.2, 0.5),
                ..node("indoor_temperature", Role::Child)
            },
            NodeSpec {
                parents: vec![Edge::varying("energy", vec![1.0, 0.6, -0.8, 1.4, -0.5, 0.9])],
                noise: NoiseSpec::new(Laplace, 0.8, 0.5),
                offsets: vec![0.0, 0.5, -0.5, 1.0, 0.0, -1.0],
                ..node("indoor_tvoc", Role::Spurious)
            },
            NodeSpec {
                parents: vec![Edge::varying("energy", vec![-0.7, 0.9, 0.5, -1.1, 0.8, -0.4])],
                noise: NoiseSpec::new(Uniform, 0.8, 0.5),
                ..node("indoor_pressure", Role::Spurious)
            },
            NodeSpec {
                noise: NoiseSpec::new(Uniform, 1.0, 0.9),
                ..node("indoor_co2", Role::Noise)
            },
        ];
        let target = TargetSpec {
            name: "energy".into(),
            intercept: 0.5,
            parents: vec![
                Edge::fixed("outdoor_temperature", 0.6),
                Edge::fixed("is_work", 1.2),
                Edge::fixed("indoor_light", 0.3),
            ],
            noise: NoiseSpec::new(Laplace, 0.3, 0.0),
            link: LinkFn::Softplus,
        };
        Self {
            nodes,
            target,
            start: default_start(),
            step_seconds: STEP_SECONDS,
            size_factors: vec![1.0, 0.7, 1.3, 0.85, 1.15, 0.6],
        }
    }
}

/// Evaluation plan: node indices in topological order, where index
/// `nodes.len()` is the target.
struct Plan {
    order: Vec<usize>,
    /// Parent indices of each node (target last).
    parents: Vec<Vec<usize>>,
}

impl ScmSpec {
    pub fn feature_names(&self) -> Vec<String> {
        self.nodes.iter().map(|n| n.name.clone()).collect()
    }

    fn index(&self) -> BTreeMap<&str, usize> {
        let mut idx: BTreeMap<&str, usize> =
            self.nodes.iter().enumerate().map(|(i, n)| (n.name.as_str(), i)).collect();
        idx.insert(self.target.name.as_str(), self.nodes.len());
        idx
    }

    fn edges_of(&self, i: usize) -> &[Edge] {
        if i == self.nodes.len() {
            &self.target.parents
        } else {
            &self.nodes[i].parents
        }
    }

    /// Checks names, parameters and acyclicity.
    pub fn validate(&self) -> Result<()> {
        self.plan().map(|_| ())
    }

    fn plan(&self) -> Result<Plan> {
        let m = self.nodes.len() + 1;
        let idx = self.index();
        if idx.len() != m {
            return Err(Error::InvalidSpec("variable names must be unique".into()));
        }
        if self.nodes.is_empty() {
            return Err(Error::InvalidSpec("no features".into()));
        }
        if self.step_seconds <= 0 {
            return Err(Error::InvalidSpec("step_seconds must be positive".into()));
        }
        if parse_timestamp(&self.start).is_none() {
            return Err(Error::InvalidSpec(format!("bad start timestamp {:?}", self.start)));
        }
        if self.size_factors.iter().any(|&f| !(f > 0.0 && f.is_finite())) {
            return Err(Error::InvalidSpec("size factors must be positive".into()));
        }
        let mut parents = vec![Vec::new(); m];
        for i in 0..m {
            let noise = if i < self.nodes.len() { self.nodes[i].noise } else { self.target.noise };
            if !(noise.scale >= 0.0 && noise.scale.is_finite() && noise.ar.abs() < 1.0) {
                return Err(Error::InvalidSpec(format!(
                    "noise of node {i}: need scale >= 0 and |ar| < 1"
                )));
            }
            if i < self.nodes.len() {
                let n = &self.nodes[i];
                if n.kind == NodeKind::Calendar && !n.parents.is_empty() {
                    return Err(Error::InvalidSpec(format!("calendar node {} has parents", n.name)));
                }
                if n.noise_scales.iter().any(|&s| !(s >= 0.0 && s.is_finite())) {
                    return Err(Error::InvalidSpec(format!("{}: bad noise scales", n.name)));
                }
            }
            for e in self.edges_of(i) {
                let j = *idx
                    .get(e.from.as_str())
                    .ok_or_else(|| Error::InvalidSpec(format!("unknown parent {:?}", e.from)))?;
                if j == i {
                    return Err(Error::InvalidSpec(format!("self loop on {:?}", e.from)));
                }
                if !e.coef.is_finite() || e.per_domain.iter().any(|c| !c.is_finite()) {
                    return Err(Error::InvalidSpec(format!("non-finite coefficient from {:?}", e.from)));
                }
                parents[i].push(j);
            }
        }
        let mut indeg: Vec<usize> = parents.iter().map(Vec::len).collect();
        let mut children = vec![Vec::new(); m];
        for (i, ps) in parents.iter().enumerate() {
            for &j in ps {
                children[j].push(i);
            }
        }
        let mut ready: Vec<usize> = (0..m).filter(|&i| indeg[i] == 0).rev().collect();
        let mut order = Vec::with_capacity(m);
        while let Some(i) = ready.pop() {
            order.push(i);
            for &c in &children[i] {
                indeg[c] -= 1;
                if indeg[c] == 0 {
                    ready.push(c);
                }
            }
        }
        if order.len() != m {
            let stuck: Vec<String> = (0..m)
                .filter(|&i| indeg[i] > 0)
                .map(|i| self.name_of(i).to_string())
                .collect();
            return Err(Error::InvalidSpec(format!("cycle among {stuck:?}")));
        }
        Ok(Plan { order, parents })
    }

    fn name_of(&self, i: usize) -> &str {
        if i == self.nodes.len() {
            &self.target.name
        } else {
            &self.nodes[i].name
        }
    }

    /// Ground-truth roles and blanket sets.
    pub fn ground_truth(&self) -> Result<GroundTruth> {
        let plan = self.plan()?;
        let y = self.nodes.len();
        let blanket_of = |stable_only: bool| -> (Vec<usize>, Vec<usize>, Vec<usize>) {
            let has_edge = |child: usize, parent: usize| {
                self.edges_of(child)
                    .iter()
                    .zip(&plan.parents[child])
                    .any(|(e, &j)| j == parent && !(stable_only && e.is_varying()))
            };
            let pa: Vec<usize> = (0..y).filter(|&j| has_edge(y, j)).collect();
            let ch: Vec<usize> = (0..y).filter(|&i| has_edge(i, y)).collect();
            let mut sp = BTreeSet::new();
            for &c in &ch {
                for j in 0..y {
                    if j != c && has_edge(c, j) {
                        sp.insert(j);
                    }
                }
            }
            (pa, ch, sp.into_iter().collect())
        };
        let names = |v: &[usize]| v.iter().map(|&i| self.nodes[i].name.clone()).collect::<Vec<_>>();
        let union = |a: &[usize], b: &[usize], c: &[usize]| {
            let s: BTreeSet<usize> = a.iter().chain(b).chain(c).copied().collect();
            s.into_iter().collect::<Vec<_>>()
        };
        let (pa, ch, sp) = blanket_of(false);
        let (spa, sch, ssp) = blanket_of(true);
        let spurious: Vec<usize> = (0..y)
            .filter(|&i| self.nodes[i].parents.iter().any(Edge::is_varying) || self.nodes[i].role == Role::Spurious)
            .collect();
        let by_role = |r: Role| {
            self.nodes
                .iter()
                .filter(|n| n.role == r)
                .map(|n| n.name.clone())
                .collect::<Vec<_>>()
        };
        Ok(GroundTruth {
            target: self.target.name.clone(),
            roles: self.nodes.iter().map(|n| (n.name.clone(), n.role)).collect(),
            parents: names(&pa),
            children: names(&ch),
            spouses: names(&sp),
            blanket: names(&union(&pa, &ch, &sp)),
            stable_blanket: names(&union(&spa, &sch, &ssp)),
            invariant_parents: by_role(Role::InvariantParent),
            spurious: names(&spurious),
        })
    }

    /// Per-domain rows for `n` time steps.
    fn simulate(&self, plan: &Plan, e: usize, n: usize, rng: &mut Rng) -> (Vec<i64>, Vec<Vec<f64>>) {
        let t0 = parse_timestamp(&self.start).expect("validated");
        let ts: Vec<i64> = (0..n as i64).map(|i| t0 + i * self.step_seconds).collect();
        let cal = WorkCalendar::default();
        let m = self.nodes.len() + 1;
        let mut vals = vec![vec![0.0; n]; m];
        let mut eps = vec![0.0; m];
        for (i, &t) in ts.iter().enumerate() {
            for &k in &plan.order {
                let noise = self.noise_of(k);
                let xi = noise.draw(rng);
                eps[k] = if i == 0 {
                    xi
                } else {
                    noise.ar * eps[k] + (1.0 - noise.ar * noise.ar).sqrt() * xi
                };
                vals[k][i] = self.evaluate(plan, k, e, t, &cal, eps[k], |j| vals[j][i]);
            }
        }
        (ts, vals)
    }

    fn noise_of(&self, k: usize) -> NoiseSpec {
        if k == self.nodes.len() {
            self.target.noise
        } else {
            self.nodes[k].noise
        }
    }

    fn evaluate(
        &self,
        plan: &Plan,
        k: usize,
        e: usize,
        t: i64,
        cal: &WorkCalendar,
        eps: f64,
        value: impl Fn(usize) -> f64,
    ) -> f64 {
        let lin: f64 = self
            .edges_of(k)
            .iter()
            .zip(&plan.parents[k])
            .map(|(edge, &j)| edge.coef_in(e) * value(j))
            .sum();
        if k == self.nodes.len() {
            let tg = &self.target;
            return tg.link.apply(tg.intercept + lin + tg.noise.scale * eps);
        }
        let node = &self.nodes[k];
        if node.kind == NodeKind::Calendar {
            return if cal.is_work(t) { 1.0 } else { 0.0 };
        }
        let hour = (t.rem_euclid(86_400)) as f64 / 3600.0;
        let daily = node.daily * (2.0 * PI * (hour - 9.0) / 24.0).sin();
        let daylight = node.daylight * (PI * (hour - 6.0) / 12.0).sin().max(0.0) * f64::from(hour >= 6.0 && hour < 18.0);
        let offset = cycled(&node.offsets, e, 0.0);
        let scale = cycled(&node.noise_scales, e, 1.0);
        offset + lin + daily + daylight + node.noise.scale * scale * eps
    }
}

fn cycled(v: &[f64], e: usize, default: f64) -> f64 {
    if v.is_empty() {
        default
    } else {
        v[e % v.len()]
    }
}

/// Ground-truth variable sets of a spec. `stable_blanket` ignores edges whose
/// coefficient varies across domains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub target: String,
    pub roles: Vec<(String, Role)>,
    pub parents: Vec<String>,
    pub children: Vec<String>,
    pub spouses: Vec<String>,
    pub blanket: Vec<String>,
    pub stable_blanket: Vec<String>,
    pub invariant_parents: Vec<String>,
    pub spurious: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub domains: Vec<DomainDataset>,
    pub truth: GroundTruth,
    pub seed: u64,
}

/// Domain identifiers used by the generator.
pub fn domain_id(e: usize) -> String {
    format!("domain_{}", e + 1)
}

/// Generates `domains` time series with about `n_per_domain` rows each
/// (scaled by the spec's size factors).
pub fn synth_scm_generate(spec: &ScmSpec, domains: usize, n_per_domain: usize, seed: u64) -> Result<SynthOutput> {
    let plan = spec.plan()?;
    if domains == 0 || n_per_domain < 2 {
        return Err(Error::Config("need at least one domain and two rows".into()));
    }
    if domains < 3 {
        log::warn!("fewer than 3 domains leave no room for a held-out test domain");
    }
    let truth = spec.ground_truth()?;
    let p = spec.nodes.len();
    let mut out = Vec::with_capacity(domains);
    for e in 0..domains {
        let n = ((n_per_domain as f64) * cycled(&spec.size_factors, e, 1.0)).round().max(2.0) as usize;
        let mut rng = seeded(derive_seed(seed, &[e as u64]));
        let (ts, vals) = spec.simulate(&plan, e, n, &mut rng);
        let mut x = Vec::with_capacity(n * p);
        for i in 0..n {
            x.extend(vals.iter().take(p).map(|col| col[i]));
        }
        out.push(DomainDataset::new(
            domain_id(e),
            ts,
            spec.step_seconds,
            spec.feature_names(),
            Tensor::matrix(n, p, x),
            vals[p].clone(),
        )?);
    }
    Ok(SynthOutput {
        domains: out,
        truth,
        seed,
    })
}

/// `n` independent draws from domain `e`'s stationary distribution: noise is
/// drawn from its marginal and each row gets a uniformly random time within
/// one week. Returns the `n x p` feature matrix and the target.
pub fn sample_static(spec: &ScmSpec, e: usize, n: usize, seed: u64) -> Result<(Tensor, Vec<f64>)> {
    let plan = spec.plan()?;
    let t0 = parse_timestamp(&spec.start).expect("validated");
    let cal = WorkCalendar::default();
    let mut rng = seeded(seed);
    let m = spec.nodes.len() + 1;
    let p = m - 1;
    let mut x = Vec::with_capacity(n * p);
    let mut y = Vec::with_capacity(n);
    let mut row = vec![0.0; m];
    for _ in 0..n {
        let t = t0 + rng.random_range(0..7 * 288) * 300;
        for &k in &plan.order {
            let eps = spec.noise_of(k).draw(&mut rng);
            let snapshot = row.clone();
            row[k] = spec.evaluate(&plan, k, e, t, &cal, eps, |j| snapshot[j]);
        }
        x.extend_from_slice(&row[..p]);
        y.push(row[p]);
    }
    Ok((Tensor::matrix(n, p, x), y))
}

/// Monte-Carlo estimates of the average conditional variances
/// `E[Var(Y | blanket)]` and `E[Var(Y | parents)]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MbVarianceEstimate {
    pub var_blanket: f64,
    pub var_parents: f64,
    /// Bootstrap standard errors of each estimate and of their difference.
    pub se_blanket: f64,
    pub se_parents: f64,
    pub se_gap: f64,
    pub var_y: f64,
    pub n: usize,
    pub blanket: Vec<String>,
    pub parents: Vec<String>,
}

impl MbVarianceEstimate {
    /// `var_parents - var_blanket`.
    pub fn gap(&self) -> f64 {
        self.var_parents - self.var_blanket
    }
}

const BOOTSTRAP_REPS: usize = 200;

/// Regression-based estimate: `Y` is fitted by least squares on a quadratic
/// basis (linear, square and pairwise product terms) of the conditioning set
/// using the first half of the sample; the mean squared residual on the
/// second half estimates the conditional variance. Standard errors come from
/// a paired bootstrap over the evaluation half.
pub fn mb_variance_check(spec: &ScmSpec, n: usize, seed: u64) -> Result<MbVarianceEstimate> {
    if n < 1000 {
        log::warn!("mb_variance_check with n = {n} < 1000: estimates will be noisy");
    }
    let truth = spec.ground_truth()?;
    if truth.children.is_empty() && truth.spouses.is_empty() {
        log::info!("target has no children or spouses; blanket equals parents");
    }
    let (x, y) = sample_static(spec, 0, n.max(4), seed)?;
    let names = spec.feature_names();
    let cols = |set: &[String]| -> Vec<usize> {
        set.iter()
            .map(|s| names.iter().position(|n| n == s).expect("feature"))
            .collect()
    };
    let half = y.len() / 2;
    let r_mb = holdout_residuals(&x, &y, &cols(&truth.blanket), half)?;
    let r_pa = holdout_residuals(&x, &y, &cols(&truth.parents), half)?;
    let sq_mb: Vec<f64> = r_mb.iter().map(|r| r * r).collect();
    let sq_pa: Vec<f64> = r_pa.iter().map(|r| r * r).collect();

    let mut rng = seeded(derive_seed(seed, &[0xb007]));
    let m = sq_mb.len();
    let (mut bm, mut bp, mut bg) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..BOOTSTRAP_REPS {
        let (mut a, mut b) = (0.0, 0.0);
        for _ in 0..m {
            let i = rng.random_range(0..m);
            a += sq_mb[i];
            b += sq_pa[i];
        }
        bm.push(a / m as f64);
        bp.push(b / m as f64);
        bg.push((b - a) / m as f64);
    }
    Ok(MbVarianceEstimate {
        var_blanket: stats::mean(&sq_mb),
        var_parents: stats::mean(&sq_pa),
        se_blanket: stats::std(&bm),
        se_parents: stats::std(&bp),
        se_gap: stats::std(&bg),
        var_y: stats::variance(&y),
        n: y.len(),
        blanket: truth.blanket,
        parents: truth.parents,
    })
}

fn quadratic_basis(x: &Tensor, cols: &[usize], rows: std::ops::Range<usize>) -> Tensor {
    let k = cols.len();
    let width = k + k * (k + 1) / 2;
    let mut data = Vec::with_capacity(rows.len() * width);
    for r in rows.clone() {
        let v: Vec<f64> = cols.iter().map(|&c| x.get(r, c)).collect();
        data.extend_from_slice(&v);
        for a in 0..k {
            for b in a..k {
                data.push(v[a] * v[b]);
            }
        }
    }
    Tensor::matrix(rows.len(), width, data)
}

/// Columns that are neither constant nor duplicates of an earlier column
/// (squares of binary features repeat their linear term).
fn informative_columns(basis: &Tensor) -> Vec<usize> {
    let mut keep: Vec<usize> = Vec::new();
    let cols: Vec<Vec<f64>> = (0..basis.cols()).map(|j| basis.column(j)).collect();
    for (j, col) in cols.iter().enumerate() {
        if stats::std(col) > 1e-12 && !keep.iter().any(|&k| cols[k] == *col) {
            keep.push(j);
        }
    }
    keep
}

fn holdout_residuals(x: &Tensor, y: &[f64], cols: &[usize], half: usize) -> Result<Vec<f64>> {
    let n = y.len();
    if cols.is_empty() {
        let m = stats::mean(&y[..half]);
        return Ok(y[half..].iter().map(|v| v - m).collect());
    }
    let train = quadratic_basis(x, cols, 0..half);
    let keep = informative_columns(&train);
    let train = train.select_columns(&keep);
    let eval = quadratic_basis(x, cols, half..n).select_columns(&keep);
    let fit = stats::ols(&train, &y[..half], true)?;
    Ok((0..n - half)
        .map(|i| {
            let pred: f64 = fit.intercept + eval.row(i).iter().zip(&fit.coef).map(|(a, b)| a * b).sum::<f64>();
            y[half + i] - pred
        })
        .collect())
}
