//! Robust pose-graph optimization of submap corrections with dense surface
//! terms and a line process over loop edges.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector, Matrix3, Matrix3x6, Vector3, Vector6};

use crate::cloud::PointCloud;
use crate::error::{Result, SlamError};
use crate::geometry::{se3_exp, Pose, Trajectory, Twist};
use crate::submap::Submap;

/// Loop edges with fewer correspondences are degenerate and never survive.
pub const MIN_CORRESPONDENCES: usize = 10;
const MAX_DAMPING: f64 = 1e12;

/// Point pairs `(p, q)` with `p` from the source surface and `q` from the
/// target surface, both in world coordinates.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CorrespondenceSet {
    pub pairs: Vec<(Vector3<f64>, Vector3<f64>)>,
}

impl CorrespondenceSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Pairs of every point with itself.
    pub fn identity(points: &[Vector3<f64>]) -> Self {
        Self {
            pairs: points.iter().map(|p| (*p, *p)).collect(),
        }
    }
}

/// Pairs each `p` in `source` with the nearest neighbor `q` of `X∘p` in
/// `target` when it lies within `epsilon`.
pub fn build_correspondence_set(source: &PointCloud, target: &PointCloud, x: &Pose, epsilon: f64) -> Result<CorrespondenceSet> {
    if !(epsilon > 0.0) {
        return Err(SlamError::InvalidInput("correspondence distance must be positive".into()));
    }
    if target.is_empty() {
        return Ok(CorrespondenceSet::default());
    }
    let index = target.spatial_index();
    let e2 = epsilon * epsilon;
    let pairs = source
        .positions
        .iter()
        .filter_map(|p| {
            let (j, d2) = index.nearest(&x.transform_point(p))?;
            (d2 <= e2).then(|| (*p, target.positions[j]))
        })
        .collect();
    Ok(CorrespondenceSet { pairs })
}

/// `Σ ‖T_s p − T_t X p‖²` over the stored pairs, and whether the set was
/// empty.
pub fn edge_residual(ts: &Pose, tt: &Pose, x: &Pose, corr: &CorrespondenceSet) -> (f64, bool) {
    let r = corr
        .pairs
        .iter()
        .map(|(p, _)| (ts.transform_point(p) - tt.transform_point(&x.transform_point(p))).norm_squared())
        .sum();
    (r, corr.is_empty())
}

/// Closed-form minimizer over `l ∈ [0, 1]` of `l·r + μ(√l − 1)²`.
pub fn line_process_weight(residual: f64, mu: f64) -> f64 {
    let w = mu / (mu + residual.max(0.0));
    w * w
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EdgeKind {
    Odometry,
    Loop,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Edge {
    pub source: usize,
    pub target: usize,
    pub kind: EdgeKind,
    /// Constraint `X` mapping source points onto the target surface.
    pub constraint: Pose,
    pub fitness: f64,
    /// Line-process weight after the most recent first stage.
    pub weight: f64,
    /// Mean cardinality of the two directed correspondence sets.
    pub kappa: f64,
    pub correspondences: CorrespondenceSet,
}

impl Edge {
    pub fn is_degenerate(&self) -> bool {
        self.correspondences.len() < MIN_CORRESPONDENCES || !(self.kappa > 0.0)
    }
}

/// Nodes are corrections to the submap keyframe poses, indexed by submap id;
/// node 0 is fixed.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PoseGraph {
    pub nodes: Vec<Pose>,
    pub edges: Vec<Edge>,
}

impl PoseGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Adds a node with identity correction and returns its id.
    pub fn add_node(&mut self) -> usize {
        self.nodes.push(Pose::identity());
        self.nodes.len() - 1
    }

    pub fn loop_edges(&self) -> impl Iterator<Item = &Edge> {
        self.edges.iter().filter(|e| e.kind == EdgeKind::Loop)
    }

    pub fn loop_edge_count(&self) -> usize {
        self.loop_edges().count()
    }

    /// Identity constraint between consecutive nodes `s` and `s + 1`.
    pub fn add_odometry_edge(&mut self, s: usize, correspondences: CorrespondenceSet, kappa: f64) -> Result<()> {
        if s + 1 >= self.nodes.len() {
            return Err(SlamError::InvalidInput(format!("odometry edge {s} -> {} has no node", s + 1)));
        }
        self.edges.push(Edge {
            source: s,
            target: s + 1,
            kind: EdgeKind::Odometry,
            constraint: Pose::identity(),
            fitness: 1.0,
            weight: 1.0,
            kappa,
            correspondences,
        });
        Ok(())
    }

    pub fn add_loop_edge(&mut self, s: usize, t: usize, constraint: Pose, fitness: f64, correspondences: CorrespondenceSet, kappa: f64) -> Result<()> {
        if s >= self.nodes.len() || t >= self.nodes.len() {
            return Err(SlamError::InvalidInput(format!("loop edge {s} -> {t} references a missing node")));
        }
        if s.abs_diff(t) < 2 {
            return Err(SlamError::InvalidInput(format!("loop edge {s} -> {t} joins adjacent nodes")));
        }
        self.edges.push(Edge {
            source: s,
            target: t,
            kind: EdgeKind::Loop,
            constraint,
            fitness,
            weight: 1.0,
            kappa,
            correspondences,
        });
        Ok(())
    }

    /// Errors unless every consecutive pair of nodes has an odometry edge.
    pub fn check_connected(&self) -> Result<()> {
        for s in 0..self.nodes.len().saturating_sub(1) {
            let linked = self
                .edges
                .iter()
                .any(|e| e.kind == EdgeKind::Odometry && e.source == s && e.target == s + 1);
            if !linked {
                return Err(SlamError::DisconnectedGraph(format!("no odometry edge between {s} and {}", s + 1)));
            }
        }
        Ok(())
    }

    /// Re-bases the graph after `corrections` were applied to the submaps:
    /// stored points move with their source submap, constraints become
    /// `T_t X T_s⁻¹`, weights are recorded and nodes reset to identity.
    pub fn rebase(&mut self, result: &PgoResult) -> Result<()> {
        let c = &result.corrections;
        if c.len() != self.nodes.len() {
            return Err(SlamError::InvalidInput(format!("{} corrections for {} nodes", c.len(), self.nodes.len())));
        }
        let mut weights = result.weights.iter();
        for e in &mut self.edges {
            let (ts, tt) = (c[e.source], c[e.target]);
            for (p, q) in &mut e.correspondences.pairs {
                *p = ts.transform_point(p);
                *q = tt.transform_point(q);
            }
            e.constraint = tt.compose(&e.constraint).compose(&ts.inverse());
            if e.kind == EdgeKind::Loop {
                e.weight = *weights.next().expect("one weight per loop edge");
            }
        }
        self.nodes.iter_mut().for_each(|n| *n = Pose::identity());
        Ok(())
    }

    /// Writes the text graph to `path` and the correspondence sets to the
    /// sidecar returned by [`PoseGraph::sidecar_path`].
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text())?;
        let mut w = std::io::BufWriter::new(std::fs::File::create(Self::sidecar_path(path))?);
        self.write_correspondences(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut graph = Self::from_text(BufReader::new(std::fs::File::open(path)?))?;
        let mut r = BufReader::new(std::fs::File::open(Self::sidecar_path(path))?);
        graph.read_correspondences(&mut r)?;
        Ok(graph)
    }

    pub fn sidecar_path(path: &Path) -> PathBuf {
        path.with_extension("corr")
    }

    pub fn to_text(&self) -> String {
        let pose = |p: &Pose| {
            let t = p.translation();
            let q = p.rotation().quaternion();
            format!("{} {} {} {} {} {} {}", t.x, t.y, t.z, q.i, q.j, q.k, q.w)
        };
        let mut out = String::from("POSE_GRAPH 1\n");
        for (i, n) in self.nodes.iter().enumerate() {
            out.push_str(&format!("NODE {i} {}\n", pose(n)));
        }
        for e in &self.edges {
            match e.kind {
                EdgeKind::Odometry => out.push_str(&format!("EDGE_ODOM {} {}\n", e.source, e.target)),
                EdgeKind::Loop => out.push_str(&format!(
                    "EDGE_LOOP {} {} {} {} {}\n",
                    e.source,
                    e.target,
                    pose(&e.constraint),
                    e.fitness,
                    e.weight
                )),
            }
        }
        out
    }

    /// Parses the text format; correspondence sets are left empty.
    pub fn from_text<R: BufRead>(reader: R) -> Result<Self> {
        let mut graph = PoseGraph::new();
        let mut header = false;
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let n = i + 1;
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.is_empty() || fields[0].starts_with('#') {
                continue;
            }
            let nums = |range: std::ops::Range<usize>| -> Result<Vec<f64>> {
                range
                    .map(|k| {
                        fields
                            .get(k)
                            .and_then(|s| s.parse::<f64>().ok())
                            .ok_or_else(|| SlamError::parse(n, format!("expected a number in field {}", k + 1)))
                    })
                    .collect()
            };
            let id = |k: usize| -> Result<usize> {
                fields
                    .get(k)
                    .and_then(|s| s.parse::<usize>().ok())
                    .ok_or_else(|| SlamError::parse(n, format!("expected an id in field {}", k + 1)))
            };
            let pose = |v: &[f64]| Pose::from_parts(Vector3::new(v[0], v[1], v[2]), v[3], v[4], v[5], v[6]);
            match fields[0] {
                "POSE_GRAPH" => {
                    if fields.get(1) != Some(&"1") {
                        return Err(SlamError::parse(n, "unsupported pose graph version"));
                    }
                    header = true;
                }
                _ if !header => return Err(SlamError::parse(n, "missing POSE_GRAPH header")),
                "NODE" => {
                    if id(1)? != graph.nodes.len() {
                        return Err(SlamError::parse(n, "node ids must be consecutive from 0"));
                    }
                    graph.nodes.push(pose(&nums(2..9)?));
                }
                "EDGE_ODOM" => {
                    let (s, t) = (id(1)?, id(2)?);
                    if t != s + 1 {
                        return Err(SlamError::parse(n, "odometry edges join consecutive nodes"));
                    }
                    graph
                        .add_odometry_edge(s, CorrespondenceSet::default(), 0.0)
                        .map_err(|e| SlamError::parse(n, e.to_string()))?;
                }
                "EDGE_LOOP" => {
                    let v = nums(3..12)?;
                    graph
                        .add_loop_edge(id(1)?, id(2)?, pose(&v[..7]), v[7], CorrespondenceSet::default(), 0.0)
                        .map_err(|e| SlamError::parse(n, e.to_string()))?;
                    graph.edges.last_mut().unwrap().weight = v[8];
                }
                other => return Err(SlamError::parse(n, format!("unknown record {other}"))),
            }
        }
        if !header {
            return Err(SlamError::parse(1, "missing POSE_GRAPH header"));
        }
        Ok(graph)
    }

    const SIDECAR_MAGIC: &'static [u8; 8] = b"SLAMCORR";

    /// Binary correspondence sets in edge order, little endian.
    pub fn write_correspondences<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(Self::SIDECAR_MAGIC)?;
        w.write_all(&1u32.to_le_bytes())?;
        w.write_all(&(self.edges.len() as u64).to_le_bytes())?;
        for e in &self.edges {
            w.write_all(&e.kappa.to_le_bytes())?;
            w.write_all(&(e.correspondences.len() as u64).to_le_bytes())?;
            for (p, q) in &e.correspondences.pairs {
                for v in p.iter().chain(q.iter()) {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn read_correspondences<R: Read>(&mut self, r: &mut R) -> Result<()> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != Self::SIDECAR_MAGIC {
            return Err(SlamError::Format("not a correspondence file".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        if u32::from_le_bytes(b4) != 1 {
            return Err(SlamError::Format("unsupported correspondence file version".into()));
        }
        let mut b8 = [0u8; 8];
        let mut read_u64 = |r: &mut R| -> Result<u64> {
            r.read_exact(&mut b8)?;
            Ok(u64::from_le_bytes(b8))
        };
        let count = read_u64(r)? as usize;
        if count != self.edges.len() {
            return Err(SlamError::Format(format!("{count} correspondence sets for {} edges", self.edges.len())));
        }
        for e in &mut self.edges {
            e.kappa = f64::from_bits(read_u64(r)?);
            let n = read_u64(r)? as usize;
            let mut pairs = Vec::with_capacity(n.min(1 << 20));
            for _ in 0..n {
                let mut v = [0.0; 6];
                for x in &mut v {
                    *x = f64::from_bits(read_u64(r)?);
                }
                pairs.push((Vector3::new(v[0], v[1], v[2]), Vector3::new(v[3], v[4], v[5])));
            }
            e.correspondences = CorrespondenceSet { pairs };
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MuMode {
    /// μ from each edge's own correspondence cardinality.
    PerEdge,
    /// μ from the mean cardinality over all non-degenerate loop edges.
    GlobalMean,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PgoParams {
    /// Weight λ of the loop terms.
    pub lambda: f64,
    pub mu_factor: f64,
    pub mu_mode: MuMode,
    /// Correspondence distance ε, meters.
    pub epsilon: f64,
    pub l_min: f64,
    pub initial_damping: f64,
    pub damping_increase: f64,
    pub damping_decrease: f64,
    pub max_iterations: usize,
    pub relative_tolerance: f64,
}

impl Default for PgoParams {
    fn default() -> Self {
        Self {
            lambda: 5.0,
            mu_factor: 0.04,
            mu_mode: MuMode::PerEdge,
            epsilon: 0.05,
            l_min: 0.25,
            initial_damping: 1e-4,
            damping_increase: 10.0,
            damping_decrease: 0.5,
            max_iterations: 50,
            relative_tolerance: 1e-6,
        }
    }
}

impl PgoParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lambda > 0.0
            && self.mu_factor > 0.0
            && self.epsilon > 0.0
            && self.l_min > 0.0
            && self.l_min < 1.0
            && self.initial_damping > 0.0
            && self.damping_increase > 1.0
            && self.damping_decrease > 0.0
            && self.damping_decrease < 1.0;
        if ok {
            Ok(())
        } else {
            Err(SlamError::InvalidInput(format!("invalid pose graph parameters {self:?}")))
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PgoReport {
    /// Objective after the initial weight update and after every weight
    /// update and accepted step of the first stage.
    pub stage1_trace: Vec<f64>,
    /// Objective after every accepted step of the second stage.
    pub stage2_trace: Vec<f64>,
    /// `(source, target)` of loop edges removed by the first stage.
    pub pruned: Vec<(usize, usize)>,
    /// Objective of the full first-stage energy at identity corrections.
    pub objective_before: f64,
    /// Second-stage objective at the returned corrections.
    pub objective_after: f64,
    /// Damping reached its limit without an improving step.
    pub diverged: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PgoResult {
    /// One correction per node; node 0 is the identity.
    pub corrections: Vec<Pose>,
    /// First-stage line-process weight of each loop edge, in edge order.
    pub weights: Vec<f64>,
    pub report: PgoReport,
}

/// Edge prepared for optimization: source points and their constrained
/// images.
struct Term {
    s: usize,
    t: usize,
    points: Vec<(Vector3<f64>, Vector3<f64>)>,
    mu: f64,
    is_loop: bool,
}

struct Problem {
    terms: Vec<Term>,
    nodes: usize,
    lambda: f64,
}

impl Problem {
    fn residual(&self, term: &Term, poses: &[Pose]) -> f64 {
        let (ts, tt) = (&poses[term.s], &poses[term.t]);
        term.points
            .iter()
            .map(|(p, xp)| (ts.transform_point(p) - tt.transform_point(xp)).norm_squared())
            .sum()
    }

    /// Term weight: 1 for odometry, `λ l` for loops.
    fn weight(&self, term: &Term, l: f64) -> f64 {
        if term.is_loop {
            self.lambda * l
        } else {
            1.0
        }
    }

    /// Energy over active terms.
    fn objective(&self, poses: &[Pose], l: &[f64], active: &[bool]) -> f64 {
        self.terms
            .iter()
            .zip(l)
            .zip(active)
            .filter(|(_, a)| **a)
            .map(|((term, &l), _)| {
                let w = self.weight(term, l);
                let mut e = if w > 0.0 { w * self.residual(term, poses) } else { 0.0 };
                if term.is_loop {
                    e += self.lambda * term.mu * (l.sqrt() - 1.0).powi(2);
                }
                e
            })
            .sum()
    }

    fn update_weights(&self, poses: &[Pose], l: &mut [f64], active: &[bool]) {
        for (i, term) in self.terms.iter().enumerate() {
            if term.is_loop {
                l[i] = if active[i] { line_process_weight(self.residual(term, poses), term.mu) } else { 0.0 };
            }
        }
    }

    /// Gauss–Newton system in the twists of nodes 1..n. Inactive loop terms
    /// carry zero weight.
    fn system(&self, poses: &[Pose], l: &[f64]) -> (DMatrix<f64>, DVector<f64>) {
        let dim = 6 * (self.nodes - 1);
        let mut h = DMatrix::zeros(dim, dim);
        let mut g = DVector::zeros(dim);
        let jac = |x: &Vector3<f64>| -> Matrix3x6<f64> {
            let mut j = Matrix3x6::zeros();
            j.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-crate::geometry::skew(x)));
            j.fixed_view_mut::<3, 3>(0, 3).copy_from(&Matrix3::identity());
            j
        };
        for (term, &l) in self.terms.iter().zip(l) {
            let w = self.weight(term, l);
            if w <= 0.0 {
                continue;
            }
            let (ts, tt) = (&poses[term.s], &poses[term.t]);
            let mut hss = nalgebra::Matrix6::<f64>::zeros();
            let mut hst = nalgebra::Matrix6::<f64>::zeros();
            let mut htt = nalgebra::Matrix6::<f64>::zeros();
            let mut gs = Vector6::<f64>::zeros();
            let mut gt = Vector6::<f64>::zeros();
            for (p, xp) in &term.points {
                let a = ts.transform_point(p);
                let b = tt.transform_point(xp);
                let e = a - b;
                let js = jac(&a);
                let jt = -jac(&b);
                hss += js.transpose() * js;
                hst += js.transpose() * jt;
                htt += jt.transpose() * jt;
                gs += js.transpose() * e;
                gt += jt.transpose() * e;
            }
            let blocks = [(term.s, term.s, hss), (term.s, term.t, hst), (term.t, term.s, hst.transpose()), (term.t, term.t, htt)];
            for (a, b, m) in blocks {
                if a > 0 && b > 0 {
                    let mut view = h.view_mut((6 * (a - 1), 6 * (b - 1)), (6, 6));
                    view += w * m;
                }
            }
            for (a, v) in [(term.s, gs), (term.t, gt)] {
                if a > 0 {
                    let mut view = g.rows_mut(6 * (a - 1), 6);
                    view += w * v;
                }
            }
        }
        (h, g)
    }

    /// One Levenberg–Marquardt step at fixed weights. Returns the new
    /// objective if a step was accepted, otherwise the gradient norm.
    fn lm_step(
        &self,
        poses: &mut [Pose],
        l: &[f64],
        active: &[bool],
        energy: f64,
        damping: &mut f64,
        params: &PgoParams,
    ) -> std::result::Result<f64, f64> {
        if self.nodes < 2 {
            return Err(0.0);
        }
        let (h, g) = self.system(poses, l);
        while *damping <= MAX_DAMPING {
            let mut a = h.clone();
            for i in 0..a.nrows() {
                a[(i, i)] += *damping * h[(i, i)].max(1e-12);
            }
            if let Some(chol) = a.cholesky() {
                let delta = -chol.solve(&g);
                let mut candidate = poses.to_vec();
                for (k, pose) in candidate.iter_mut().enumerate().skip(1) {
                    let xi = Vector6::from_iterator(delta.rows(6 * (k - 1), 6).iter().copied());
                    *pose = se3_exp(&Twist(xi)).compose(pose);
                }
                let e = self.objective(&candidate, l, active);
                if e <= energy {
                    poses.copy_from_slice(&candidate);
                    *damping = (*damping * params.damping_decrease).max(1e-15);
                    return Ok(e);
                }
            }
            *damping *= params.damping_increase;
        }
        *damping = params.initial_damping;
        Err(g.norm())
    }
}

/// No improving step although the gradient is not negligible.
fn stalled(gradient_norm: f64, energy: f64) -> bool {
    gradient_norm > 1e-6 * energy.max(1.0)
}

fn rel_change(prev: f64, next: f64) -> f64 {
    if prev == 0.0 {
        0.0
    } else {
        (prev - next).abs() / prev.abs()
    }
}

/// Two-stage robust optimization.
///
/// Stage 1 alternates the closed-form line-process update with
/// Levenberg–Marquardt steps on the corrections until the relative change of
/// the objective drops below the tolerance, then removes loop edges whose
/// weight is below `l_min`. Stage 2 continues from the stage 1 corrections
/// with the surviving loop edges at weight 1. Degenerate loop edges get
/// weight 0 and are always removed.
pub fn optimize(graph: &PoseGraph, params: &PgoParams) -> Result<PgoResult> {
    params.validate()?;
    graph.check_connected()?;
    let n = graph.nodes.len();
    if n == 0 {
        return Err(SlamError::InsufficientData("pose graph has no nodes".into()));
    }
    let loops: Vec<&Edge> = graph.loop_edges().collect();
    let kappa_mean = {
        let k: Vec<f64> = loops.iter().filter(|e| !e.is_degenerate()).map(|e| e.kappa).collect();
        if k.is_empty() {
            0.0
        } else {
            k.iter().sum::<f64>() / k.len() as f64
        }
    };
    let mut terms = Vec::with_capacity(graph.edges.len());
    let mut active = Vec::with_capacity(graph.edges.len());
    for e in &graph.edges {
        let is_loop = e.kind == EdgeKind::Loop;
        let kappa = match params.mu_mode {
            MuMode::PerEdge => e.kappa,
            MuMode::GlobalMean => kappa_mean,
        };
        terms.push(Term {
            s: e.source,
            t: e.target,
            points: e.correspondences.pairs.iter().map(|(p, _)| (*p, e.constraint.transform_point(p))).collect(),
            mu: params.mu_factor * kappa,
            is_loop,
        });
        active.push(!is_loop || !e.is_degenerate());
    }
    let problem = Problem {
        terms,
        nodes: n,
        lambda: params.lambda,
    };

    let mut poses = graph.nodes.clone();
    poses[0] = Pose::identity();
    let mut l: Vec<f64> = problem.terms.iter().map(|_| 1.0).collect();
    let mut report = PgoReport {
        objective_before: problem.objective(&poses, &l, &active),
        ..PgoReport::default()
    };

    // stage 1
    let mut damping = params.initial_damping;
    problem.update_weights(&poses, &mut l, &active);
    let mut energy = problem.objective(&poses, &l, &active);
    report.stage1_trace.push(energy);
    for _ in 0..params.max_iterations {
        let start = energy;
        match problem.lm_step(&mut poses, &l, &active, energy, &mut damping, params) {
            Ok(e) => {
                energy = e;
                report.stage1_trace.push(energy);
            }
            Err(grad) => report.diverged |= stalled(grad, energy),
        }
        problem.update_weights(&poses, &mut l, &active);
        energy = problem.objective(&poses, &l, &active);
        report.stage1_trace.push(energy);
        if rel_change(start, energy) < params.relative_tolerance {
            break;
        }
    }
    let weights: Vec<f64> = problem.terms.iter().zip(&l).filter(|(t, _)| t.is_loop).map(|(_, &l)| l).collect();
    for ((term, li), act) in problem.terms.iter().zip(l.iter_mut()).zip(active.iter_mut()) {
        if term.is_loop {
            if *li < params.l_min || !*act {
                report.pruned.push((term.s, term.t));
                *act = false;
                *li = 0.0;
            } else {
                *li = 1.0;
            }
        }
    }

    // stage 2: only the regularizer-free energy remains for survivors
    let mut damping = params.initial_damping;
    let mut energy = problem.objective(&poses, &l, &active);
    report.stage2_trace.push(energy);
    for _ in 0..params.max_iterations {
        let e = match problem.lm_step(&mut poses, &l, &active, energy, &mut damping, params) {
            Ok(e) => e,
            Err(grad) => {
                report.diverged |= stalled(grad, energy);
                break;
            }
        };
        let change = rel_change(energy, e);
        energy = e;
        report.stage2_trace.push(energy);
        if change < params.relative_tolerance {
            break;
        }
    }
    report.objective_after = energy;
    if report.diverged {
        log::warn!("pose graph optimization stalled; returning the best corrections found");
    }
    Ok(PgoResult {
        corrections: poses,
        weights,
        report,
    })
}

/// Applies `corrections[s.id]` to every submap and rewrites the trajectory
/// poses of their frames.
pub fn apply_corrections(submaps: &mut [Submap], trajectory: &mut Trajectory, corrections: &[Pose]) -> Result<()> {
    for s in submaps.iter() {
        if s.id >= corrections.len() {
            return Err(SlamError::InvalidInput(format!("no correction for submap {}", s.id)));
        }
    }
    for s in submaps.iter_mut() {
        s.apply_correction(&corrections[s.id]);
        for (frame_id, pose) in &s.frames {
            trajectory.set_pose(*frame_id, *pose);
        }
    }
    Ok(())
}
