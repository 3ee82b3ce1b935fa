//! Hidden-Markov map matching of 1 Hz GPS traces onto the street graph, and
//! interpolation of the matched path to per-video-frame positions.
//!
//! The model is the classic one: emissions are zero-mean Gaussians in the
//! GPS-to-road distance, transitions are exponential in the absolute
//! difference between the great-circle distance of consecutive fixes and the
//! route distance between their snapped candidates. Viterbi over the
//! candidate lattice picks the jointly most probable road sequence.
//! Observations with no candidate in range break the HMM: the trace is split
//! there and the pieces are matched independently.

use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::geo::{bearing_deg, haversine_m, GeoError, GeoPoint, LocalProjection};
use crate::osm::{EdgeId, StreetGraph};

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_74;

/// Search cutoff for route distances between consecutive candidates:
/// `2 * gc + ROUTE_CUTOFF_SLACK_M` meters.
pub const ROUTE_CUTOFF_SLACK_M: f64 = 2000.0;

#[derive(Debug, thiserror::Error)]
pub enum MatchError {
    #[error("invalid parameter: {0}")]
    BadParam(String),
    #[error("trace has no samples")]
    EmptyTrace,
    #[error("trace timestamps must be strictly increasing (sample {0})")]
    NonMonotonicTime(usize),
    #[error("graph has no edges")]
    EmptyGraph,
    #[error("no observation has a candidate within the search radius")]
    NoCandidatesAnywhere,
    #[error("need at least two matched observations to interpolate")]
    TooFewMatched,
    #[error("matched states at observations {0} and {1} are not connected in the graph")]
    DisconnectedStates(usize, usize),
    #[error("frame {frame} at {rate_hz} fps lies more than one sample period past the last matched observation")]
    FrameRangeExceeded { frame: usize, rate_hz: f64 },
    #[error("record {index}: frame indices must be contiguous from 0")]
    NonContiguousFrames { index: usize },
    #[error("CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Geo(#[from] GeoError),
}

// ---------------------------------------------------------------------------
// trace and parameters

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GpsSample {
    pub t: f64,
    pub point: GeoPoint,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GpsTrace {
    pub samples: Vec<GpsSample>,
    pub nominal_rate_hz: f64,
}

impl GpsTrace {
    pub fn new(samples: Vec<GpsSample>, nominal_rate_hz: f64) -> Result<Self, MatchError> {
        if samples.is_empty() {
            return Err(MatchError::EmptyTrace);
        }
        if !(nominal_rate_hz.is_finite() && nominal_rate_hz > 0.0) {
            return Err(MatchError::BadParam(format!("nominal rate {nominal_rate_hz} Hz")));
        }
        for (i, w) in samples.windows(2).enumerate() {
            if !(w[1].t > w[0].t) {
                return Err(MatchError::NonMonotonicTime(i + 1));
            }
        }
        for s in &samples {
            GeoPoint::new(s.point.lat, s.point.lon)?;
        }
        Ok(Self { samples, nominal_rate_hz })
    }

    /// Read a `t,lat,lon` CSV (header required, seconds and degrees).
    pub fn read_csv<R: Read>(reader: R, nominal_rate_hz: f64) -> Result<Self, MatchError> {
        #[derive(Deserialize)]
        struct Row {
            t: f64,
            lat: f64,
            lon: f64,
        }
        let mut samples = Vec::new();
        for row in csv::Reader::from_reader(reader).deserialize() {
            let row: Row = row?;
            samples.push(GpsSample { t: row.t, point: GeoPoint { lat: row.lat, lon: row.lon } });
        }
        Self::new(samples, nominal_rate_hz)
    }

    pub fn read_csv_file<P: AsRef<Path>>(path: P, nominal_rate_hz: f64) -> Result<Self, MatchError> {
        Self::read_csv(std::fs::File::open(path)?, nominal_rate_hz)
    }
}

/// HMM parameters. Defaults: the published emission noise estimate for the
/// classic matcher, a transition scale suited to 1 Hz urban traces, and a
/// candidate search that keeps the lattice small.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchParams {
    pub sigma_z_m: f64,
    pub beta_m: f64,
    pub candidate_radius_m: f64,
    pub max_candidates_per_obs: usize,
}

impl Default for MatchParams {
    fn default() -> Self {
        Self { sigma_z_m: 4.07, beta_m: 20.0, candidate_radius_m: 50.0, max_candidates_per_obs: 8 }
    }
}

impl MatchParams {
    pub fn validate(&self) -> Result<(), MatchError> {
        let pos = |v: f64, name: &str| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(MatchError::BadParam(format!("{name} must be strictly positive, got {v}")))
            }
        };
        pos(self.sigma_z_m, "sigma_z_m")?;
        pos(self.beta_m, "beta_m")?;
        pos(self.candidate_radius_m, "candidate_radius_m")?;
        if self.max_candidates_per_obs == 0 {
            return Err(MatchError::BadParam("max_candidates_per_obs must be >= 1".into()));
        }
        Ok(())
    }
}

/// A GPS observation snapped onto one edge.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CandidateState {
    pub edge_id: EdgeId,
    /// Planar arc length from the edge geometry start to the snap point.
    pub offset_m: f64,
    pub point: GeoPoint,
    /// Great-circle distance from the observation to the snap point.
    pub dist_m: f64,
}

// ---------------------------------------------------------------------------
// model terms

/// Log density of the Gaussian emission: `-(d/sigma)^2 / 2 - ln(sqrt(2 pi) sigma)`.
pub fn emission_log_prob(dist_m: f64, sigma_z_m: f64) -> Result<f64, MatchError> {
    if !(sigma_z_m.is_finite() && sigma_z_m > 0.0) {
        return Err(MatchError::BadParam(format!("sigma_z must be positive, got {sigma_z_m}")));
    }
    Ok(-0.5 * (dist_m / sigma_z_m).powi(2) - LN_SQRT_2PI - sigma_z_m.ln())
}

/// Log density of the exponential transition: `-|gc - route| / beta - ln beta`.
/// An unreachable pair is described by `route_dist_m = +inf` and maps to `-inf`.
pub fn transition_log_prob(gc_dist_m: f64, route_dist_m: f64, beta_m: f64) -> Result<f64, MatchError> {
    if !(beta_m.is_finite() && beta_m > 0.0) {
        return Err(MatchError::BadParam(format!("beta must be positive, got {beta_m}")));
    }
    Ok(-(gc_dist_m - route_dist_m).abs() / beta_m - beta_m.ln())
}

/// Most-likely path through a candidate lattice. `emit[t][j]` is the
/// emission log probability of candidate `j` at observation `t`;
/// `trans(t, i, j)` the transition log probability from candidate `i` at
/// `t - 1` to candidate `j` at `t`. Every observation must have at least
/// one candidate. Ties resolve to the lowest index at each step.
pub fn viterbi_path<F>(emit: &[Vec<f64>], mut trans: F) -> Vec<usize>
where
    F: FnMut(usize, usize, usize) -> f64,
{
    assert!(
        !emit.is_empty() && emit.iter().all(|e| !e.is_empty()),
        "every observation needs at least one candidate"
    );
    let mut score = emit[0].clone();
    let mut back: Vec<Vec<usize>> = Vec::with_capacity(emit.len().saturating_sub(1));
    for t in 1..emit.len() {
        let mut next = vec![f64::NEG_INFINITY; emit[t].len()];
        let mut ptr = vec![0usize; emit[t].len()];
        for (j, &e) in emit[t].iter().enumerate() {
            for (i, &si) in score.iter().enumerate() {
                let s = si + trans(t, i, j) + e;
                if s > next[j] {
                    next[j] = s;
                    ptr[j] = i;
                }
            }
        }
        score = next;
        back.push(ptr);
    }
    let mut best = 0usize;
    for (j, &s) in score.iter().enumerate() {
        if s > score[best] {
            best = j;
        }
    }
    let mut path = vec![best];
    for ptr in back.iter().rev() {
        best = ptr[*path.last().unwrap()];
        path.push(best);
    }
    path.reverse();
    path
}

// ---------------------------------------------------------------------------
// matcher

struct PlanarEdge {
    pts: Vec<[f64; 2]>,
    cum: Vec<f64>,
    len: f64,
    min: [f64; 2],
    max: [f64; 2],
    from_idx: usize,
    to_idx: usize,
    oneway: bool,
}

#[derive(Clone, Copy)]
struct Arc {
    to: usize,
    len: f64,
    edge: usize,
    forward: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Exit {
    ForwardEnd,
    BackwardStart,
}

/// Immutable matching context: planar edge cache and node adjacency for one
/// graph. Matching itself is pure, so one `Matcher` may serve many traces,
/// concurrently if desired.
pub struct Matcher<'g> {
    graph: &'g StreetGraph,
    proj: LocalProjection,
    edges_px: Vec<PlanarEdge>,
    edge_index: HashMap<EdgeId, usize>,
    adj: Vec<Vec<Arc>>,
    n_nodes: usize,
}

/// Output of [`Matcher::match_trace`]: one entry per observation (`None`
/// where no candidate existed) and the indices where the HMM broke.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub states: Vec<Option<CandidateState>>,
    pub break_obs: Vec<usize>,
}

impl<'g> Matcher<'g> {
    pub fn new(graph: &'g StreetGraph) -> Result<Self, MatchError> {
        if graph.edges().is_empty() {
            return Err(MatchError::EmptyGraph);
        }
        let proj = graph.local_projection();
        let node_idx: HashMap<_, _> =
            graph.nodes().keys().enumerate().map(|(i, &id)| (id, i)).collect();
        let n_nodes = node_idx.len();

        let mut edges_px = Vec::with_capacity(graph.edges().len());
        let mut edge_index = HashMap::with_capacity(graph.edges().len());
        let mut adj = vec![Vec::new(); n_nodes];
        for (i, e) in graph.edges().iter().enumerate() {
            let pts: Vec<[f64; 2]> = e.geometry.iter().map(|&p| proj.to_xy(p)).collect();
            let mut cum = Vec::with_capacity(pts.len());
            let mut acc = 0.0;
            cum.push(0.0);
            for w in pts.windows(2) {
                acc += ((w[0][0] - w[1][0]).powi(2) + (w[0][1] - w[1][1]).powi(2)).sqrt();
                cum.push(acc);
            }
            let (mut min, mut max) = (pts[0], pts[0]);
            for p in &pts {
                min = [min[0].min(p[0]), min[1].min(p[1])];
                max = [max[0].max(p[0]), max[1].max(p[1])];
            }
            let (from_idx, to_idx) = (node_idx[&e.from], node_idx[&e.to]);
            adj[from_idx].push(Arc { to: to_idx, len: acc, edge: i, forward: true });
            if !e.oneway {
                adj[to_idx].push(Arc { to: from_idx, len: acc, edge: i, forward: false });
            }
            edge_index.insert(e.id, i);
            edges_px.push(PlanarEdge { pts, cum, len: acc, min, max, from_idx, to_idx, oneway: e.oneway });
        }
        Ok(Self { graph, proj, edges_px, edge_index, adj, n_nodes })
    }

    pub fn graph(&self) -> &StreetGraph {
        self.graph
    }

    /// Snap candidates for one observation: projections onto every edge
    /// within `candidate_radius_m`, sorted by distance (ties by edge id),
    /// truncated to `max_candidates_per_obs`.
    pub fn candidate_states(&self, p: GeoPoint, params: &MatchParams) -> Vec<CandidateState> {
        let q = self.proj.to_xy(p);
        let r = params.candidate_radius_m;
        let mut out: Vec<(f64, usize, CandidateState)> = Vec::new();
        for (i, pe) in self.edges_px.iter().enumerate() {
            // Cheap reject on the planar bbox.
            let dx = (pe.min[0] - q[0]).max(0.0).max(q[0] - pe.max[0]);
            let dy = (pe.min[1] - q[1]).max(0.0).max(q[1] - pe.max[1]);
            if dx * dx + dy * dy > r * r {
                continue;
            }
            let (offset, snapped) = project_onto(pe, q);
            let point = self.proj.from_xy(snapped);
            let dist = haversine_m(p, point);
            if dist <= r {
                out.push((dist, i, CandidateState { edge_id: self.graph.edges()[i].id, offset_m: offset, point, dist_m: dist }));
            }
        }
        out.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        out.truncate(params.max_candidates_per_obs);
        out.into_iter().map(|(_, _, c)| c).collect()
    }

    /// Shortest route distance from one candidate to another, traversing
    /// edges only in their legal directions; `+inf` if no path exists within
    /// `cutoff_m`.
    pub fn route_distance_m(&self, from: &CandidateState, to: &CandidateState, cutoff_m: f64) -> f64 {
        self.route_dists_from(from, std::slice::from_ref(to), cutoff_m)[0]
    }

    fn route_dists_from(&self, from: &CandidateState, targets: &[CandidateState], cutoff: f64) -> Vec<f64> {
        let ea = self.edge_index[&from.edge_id];
        let pe = &self.edges_px[ea];
        let mut seeds = vec![(pe.to_idx, pe.len - from.offset_m, Exit::ForwardEnd)];
        if !pe.oneway {
            seeds.push((pe.from_idx, from.offset_m, Exit::BackwardStart));
        }
        let dij = self.dijkstra(&seeds, cutoff);

        targets
            .iter()
            .map(|t| {
                let eb = self.edge_index[&t.edge_id];
                let pb = &self.edges_px[eb];
                let mut best = f64::INFINITY;
                if eb == ea {
                    let delta = t.offset_m - from.offset_m;
                    if delta >= 0.0 || !pb.oneway {
                        best = delta.abs();
                    }
                }
                let via_from = dij.dist[pb.from_idx] + t.offset_m;
                best = best.min(via_from);
                if !pb.oneway {
                    best = best.min(dij.dist[pb.to_idx] + (pb.len - t.offset_m));
                }
                if best <= cutoff {
                    best
                } else {
                    f64::INFINITY
                }
            })
            .collect()
    }

    fn dijkstra(&self, seeds: &[(usize, f64, Exit)], cutoff: f64) -> Dijkstra {
        use std::cmp::Ordering;
        use std::collections::BinaryHeap;

        struct Item {
            cost: f64,
            node: usize,
        }
        impl PartialEq for Item {
            fn eq(&self, o: &Self) -> bool {
                self.cost == o.cost && self.node == o.node
            }
        }
        impl Eq for Item {}
        impl Ord for Item {
            fn cmp(&self, o: &Self) -> Ordering {
                // Reversed: BinaryHeap is a max-heap, we want min cost first.
                o.cost.partial_cmp(&self.cost).unwrap().then_with(|| o.node.cmp(&self.node))
            }
        }
        impl PartialOrd for Item {
            fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
                Some(self.cmp(o))
            }
        }

        let mut d = Dijkstra {
            dist: vec![f64::INFINITY; self.n_nodes],
            pred: vec![None; self.n_nodes],
            seed_exit: vec![None; self.n_nodes],
        };
        let mut heap = BinaryHeap::new();
        for &(node, cost, exit) in seeds {
            if cost <= cutoff && cost < d.dist[node] {
                d.dist[node] = cost;
                d.seed_exit[node] = Some(exit);
                heap.push(Item { cost, node });
            }
        }
        while let Some(Item { cost, node }) = heap.pop() {
            if cost > d.dist[node] {
                continue;
            }
            for arc in &self.adj[node] {
                let nd = cost + arc.len;
                if nd <= cutoff && nd < d.dist[arc.to] {
                    d.dist[arc.to] = nd;
                    d.pred[arc.to] = Some((node, *arc));
                    d.seed_exit[arc.to] = None;
                    heap.push(Item { cost: nd, node: arc.to });
                }
            }
        }
        d
    }

    /// HMM match with break handling. Returns one state per observation;
    /// observations with an empty candidate set are `None` and listed in
    /// `break_obs`, and the runs between them are matched independently.
    pub fn match_trace(&self, trace: &GpsTrace, params: &MatchParams) -> Result<MatchResult, MatchError> {
        params.validate()?;
        let n = trace.samples.len();
        if n == 0 {
            return Err(MatchError::EmptyTrace);
        }
        let cands: Vec<Vec<CandidateState>> =
            trace.samples.iter().map(|s| self.candidate_states(s.point, params)).collect();
        let break_obs: Vec<usize> =
            cands.iter().enumerate().filter(|(_, c)| c.is_empty()).map(|(i, _)| i).collect();
        if break_obs.len() == n {
            return Err(MatchError::NoCandidatesAnywhere);
        }
        if !break_obs.is_empty() {
            log::warn!("HMM break at {} of {} observations", break_obs.len(), n);
        }

        let mut states: Vec<Option<CandidateState>> = vec![None; n];
        let mut seg_start = None;
        for i in 0..=n {
            let has = i < n && !cands[i].is_empty();
            match (seg_start, has) {
                (None, true) => seg_start = Some(i),
                (Some(s), false) => {
                    for (k, c) in self.viterbi_segment(&trace.samples[s..i], &cands[s..i], params).into_iter().enumerate() {
                        states[s + k] = Some(c);
                    }
                    seg_start = None;
                }
                _ => {}
            }
        }
        Ok(MatchResult { states, break_obs })
    }

    /// Viterbi over one gap-free run of observations. Ties take the lowest
    /// candidate index, which by candidate ordering is the smallest
    /// emission distance.
    fn viterbi_segment(
        &self,
        samples: &[GpsSample],
        cands: &[Vec<CandidateState>],
        params: &MatchParams,
    ) -> Vec<CandidateState> {
        let emit: Vec<Vec<f64>> = cands
            .iter()
            .map(|cs| {
                cs.iter()
                    .map(|c| emission_log_prob(c.dist_m, params.sigma_z_m).expect("params validated"))
                    .collect()
            })
            .collect();
        // Transition tables, one per consecutive observation pair. Route
        // distances come from one Dijkstra per source candidate.
        let trans: Vec<Vec<Vec<f64>>> = (1..cands.len())
            .map(|t| {
                let gc = haversine_m(samples[t - 1].point, samples[t].point);
                let cutoff = 2.0 * gc + ROUTE_CUTOFF_SLACK_M;
                cands[t - 1]
                    .iter()
                    .map(|a| {
                        self.route_dists_from(a, &cands[t], cutoff)
                            .into_iter()
                            .map(|route| {
                                transition_log_prob(gc, route, params.beta_m)
                                    .expect("params validated")
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        let path = viterbi_path(&emit, |t, i, j| trans[t - 1][i][j]);
        path.iter().zip(cands).map(|(&j, c)| c[j]).collect()
    }
}

struct Dijkstra {
    dist: Vec<f64>,
    pred: Vec<Option<(usize, Arc)>>,
    seed_exit: Vec<Option<Exit>>,
}

/// Project a planar point onto a cached edge; returns (arc offset, point).
/// Segment ties keep the earlier segment.
fn project_onto(pe: &PlanarEdge, q: [f64; 2]) -> (f64, [f64; 2]) {
    let mut best = (f64::INFINITY, 0.0, pe.pts[0]);
    for (k, w) in pe.pts.windows(2).enumerate() {
        let (dx, dy) = (w[1][0] - w[0][0], w[1][1] - w[0][1]);
        let len2 = dx * dx + dy * dy;
        let t = if len2 > 0.0 {
            (((q[0] - w[0][0]) * dx + (q[1] - w[0][1]) * dy) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let s = [w[0][0] + t * dx, w[0][1] + t * dy];
        let d2 = (q[0] - s[0]).powi(2) + (q[1] - s[1]).powi(2);
        if d2 < best.0 {
            best = (d2, pe.cum[k] + t * len2.sqrt(), s);
        }
    }
    (best.1, best.2)
}

fn point_at(pe: &PlanarEdge, off: f64) -> [f64; 2] {
    let off = off.clamp(0.0, pe.len);
    let k = match pe.cum.binary_search_by(|c| c.partial_cmp(&off).unwrap()) {
        Ok(k) => k.min(pe.pts.len() - 2),
        Err(k) => k - 1,
    };
    let seg = pe.cum[k + 1] - pe.cum[k];
    let t = if seg > 0.0 { (off - pe.cum[k]) / seg } else { 0.0 };
    [
        pe.pts[k][0] + t * (pe.pts[k + 1][0] - pe.pts[k][0]),
        pe.pts[k][1] + t * (pe.pts[k + 1][1] - pe.pts[k][1]),
    ]
}

/// Polyline between two arc offsets on one edge, in travel order (reversed
/// when `b < a`). Endpoints are interpolated exactly.
fn slice_edge(pe: &PlanarEdge, a: f64, b: f64) -> Vec<[f64; 2]> {
    let (lo, hi, rev) = if a <= b { (a, b, false) } else { (b, a, true) };
    let mut out = vec![point_at(pe, lo)];
    for (k, &c) in pe.cum.iter().enumerate() {
        if c > lo && c < hi {
            out.push(pe.pts[k]);
        }
    }
    out.push(point_at(pe, hi));
    if rev {
        out.reverse();
    }
    out
}

// ---------------------------------------------------------------------------
// frame interpolation

/// Per-frame snapped position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameFix {
    pub frame: usize,
    pub lat: f64,
    pub lon: f64,
    pub edge_id: EdgeId,
    pub heading_deg: f64,
}

impl FrameFix {
    pub fn point(&self) -> GeoPoint {
        GeoPoint { lat: self.lat, lon: self.lon }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatchedTrace {
    pub frames: Vec<FrameFix>,
}

impl MatchedTrace {
    pub fn write_csv<P: AsRef<Path>>(&self, path: P) -> Result<(), MatchError> {
        let mut w = csv::Writer::from_path(path)?;
        for f in &self.frames {
            w.serialize(f)?;
        }
        Ok(w.flush()?)
    }

    pub fn read_csv<P: AsRef<Path>>(path: P) -> Result<Self, MatchError> {
        let mut frames = Vec::new();
        for (i, row) in csv::Reader::from_path(path)?.deserialize().enumerate() {
            let f: FrameFix = row?;
            if f.frame != i {
                return Err(MatchError::NonContiguousFrames { index: i });
            }
            GeoPoint::new(f.lat, f.lon)?;
            frames.push(f);
        }
        Ok(Self { frames })
    }
}

struct PathAccum {
    pts: Vec<[f64; 2]>,
    cum: Vec<f64>,
    seg_edge: Vec<EdgeId>,
}

impl PathAccum {
    fn new() -> Self {
        Self { pts: Vec::new(), cum: Vec::new(), seg_edge: Vec::new() }
    }

    fn total(&self) -> f64 {
        self.cum.last().copied().unwrap_or(0.0)
    }

    fn push(&mut self, p: [f64; 2], edge: EdgeId) {
        if let Some(last) = self.pts.last() {
            let d = ((last[0] - p[0]).powi(2) + (last[1] - p[1]).powi(2)).sqrt();
            if d == 0.0 {
                return;
            }
            self.cum.push(self.total() + d);
            self.seg_edge.push(edge);
        } else {
            self.cum.push(0.0);
        }
        self.pts.push(p);
    }

    /// Position and owning edge at arc position `s` (clamped).
    fn at(&self, s: f64, fallback_edge: EdgeId) -> ([f64; 2], EdgeId) {
        if self.pts.len() < 2 {
            return (self.pts.first().copied().unwrap_or([0.0, 0.0]), fallback_edge);
        }
        let s = s.clamp(0.0, self.total());
        let k = match self.cum.binary_search_by(|c| c.partial_cmp(&s).unwrap()) {
            Ok(k) => k.min(self.pts.len() - 2),
            Err(k) => k - 1,
        };
        let seg = self.cum[k + 1] - self.cum[k];
        let t = if seg > 0.0 { (s - self.cum[k]) / seg } else { 0.0 };
        let p = [
            self.pts[k][0] + t * (self.pts[k + 1][0] - self.pts[k][0]),
            self.pts[k][1] + t * (self.pts[k + 1][1] - self.pts[k][1]),
        ];
        (p, self.seg_edge[k])
    }
}

impl Matcher<'_> {
    /// Shortest route polyline from `a` to `b` as planar points annotated
    /// with the edge each segment lies on; `None` when unreachable within
    /// `cutoff`.
    fn route_path(&self, a: &CandidateState, b: &CandidateState, cutoff: f64) -> Option<(f64, Vec<([f64; 2], EdgeId)>)> {
        let ea = self.edge_index[&a.edge_id];
        let eb = self.edge_index[&b.edge_id];
        let (pa, pb) = (&self.edges_px[ea], &self.edges_px[eb]);

        let mut best_cost = f64::INFINITY;
        let mut direct = false;
        if ea == eb {
            let delta = b.offset_m - a.offset_m;
            if delta >= 0.0 || !pa.oneway {
                best_cost = delta.abs();
                direct = true;
            }
        }

        let mut seeds = vec![(pa.to_idx, pa.len - a.offset_m, Exit::ForwardEnd)];
        if !pa.oneway {
            seeds.push((pa.from_idx, a.offset_m, Exit::BackwardStart));
        }
        let dij = self.dijkstra(&seeds, cutoff);
        // Entry into the target edge: forward from its start node, or
        // backward from its end node when two-way.
        let mut entry: Option<(usize, f64)> = None; // (entry node, cost)
        let via_from = dij.dist[pb.from_idx] + b.offset_m;
        if via_from < best_cost {
            best_cost = via_from;
            entry = Some((pb.from_idx, b.offset_m));
            direct = false;
        }
        if !pb.oneway {
            let via_to = dij.dist[pb.to_idx] + (pb.len - b.offset_m);
            if via_to < best_cost {
                best_cost = via_to;
                entry = Some((pb.to_idx, pb.len - b.offset_m));
                direct = false;
            }
        }
        if best_cost > cutoff || best_cost.is_infinite() {
            return None;
        }

        let mut out: Vec<([f64; 2], EdgeId)> = Vec::new();
        if direct {
            for p in slice_edge(pa, a.offset_m, b.offset_m) {
                out.push((p, a.edge_id));
            }
            return Some((best_cost, out));
        }

        let (entry_node, _) = entry.expect("non-direct path has an entry node");
        // Arcs from the seed to the entry node, recovered via predecessors.
        let mut arcs: Vec<Arc> = Vec::new();
        let mut node = entry_node;
        while let Some((prev, arc)) = dij.pred[node] {
            arcs.push(arc);
            node = prev;
        }
        arcs.reverse();
        let exit = dij.seed_exit[node].expect("predecessor chain ends at a seed");

        // Exit span on the source edge.
        let exit_target = match exit {
            Exit::ForwardEnd => pa.len,
            Exit::BackwardStart => 0.0,
        };
        for p in slice_edge(pa, a.offset_m, exit_target) {
            out.push((p, a.edge_id));
        }
        // Full intermediate edges.
        for arc in arcs {
            let pe = &self.edges_px[arc.edge];
            let id = self.graph.edges()[arc.edge].id;
            let mut pts = pe.pts.clone();
            if !arc.forward {
                pts.reverse();
            }
            for p in pts {
                out.push((p, id));
            }
        }
        // Entry span on the target edge.
        let entry_off = if entry_node == pb.from_idx { 0.0 } else { pb.len };
        for p in slice_edge(pb, entry_off, b.offset_m) {
            out.push((p, b.edge_id));
        }
        Some((best_cost, out))
    }

    /// Interpolate matched observations to frame positions.
    ///
    /// The frame clock is anchored at the first trace timestamp: frame `i`
    /// is at `t0 + i / frame_rate`, so knots land exactly on snapped points.
    /// Positions move linearly in arc length along the matched route;
    /// heading is the travel direction over a centered 1 s window (one-sided
    /// at the ends). Frames may overshoot the last matched observation by at
    /// most one nominal sample period (position clamps to the path end).
    pub fn interpolate_to_frames(
        &self,
        trace: &GpsTrace,
        states: &[Option<CandidateState>],
        frame_rate_hz: f64,
        n_frames: usize,
    ) -> Result<MatchedTrace, MatchError> {
        if !(frame_rate_hz.is_finite() && frame_rate_hz > 0.0) {
            return Err(MatchError::BadParam(format!("frame rate {frame_rate_hz} Hz")));
        }
        assert_eq!(trace.samples.len(), states.len(), "one state slot per observation");
        let matched: Vec<(usize, f64, &CandidateState)> = states
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.as_ref().map(|c| (i, trace.samples[i].t, c)))
            .collect();
        if matched.len() < 2 {
            return Err(MatchError::TooFewMatched);
        }

        // Stitch the route between consecutive matched states into one
        // polyline and remember the arc position of each knot.
        let mut path = PathAccum::new();
        let mut knot_s = Vec::with_capacity(matched.len());
        path.push(self.proj.to_xy(matched[0].2.point), matched[0].2.edge_id);
        knot_s.push(0.0);
        for w in matched.windows(2) {
            let (ia, _, a) = w[0];
            let (ib, _, b) = w[1];
            let gc = haversine_m(a.point, b.point);
            let cutoff = 2.0 * gc + ROUTE_CUTOFF_SLACK_M;
            let (_, pts) = self
                .route_path(a, b, cutoff)
                .ok_or(MatchError::DisconnectedStates(ia, ib))?;
            for (p, e) in pts {
                path.push(p, e);
            }
            knot_s.push(path.total());
        }

        let t0 = trace.samples[0].t;
        let t_last = matched.last().unwrap().1;
        let period = 1.0 / trace.nominal_rate_hz;

        // Piecewise-linear time -> arc length over the matched knots.
        let times: Vec<f64> = matched.iter().map(|&(_, t, _)| t).collect();
        let s_of_t = |tau: f64| -> f64 {
            if tau <= times[0] {
                return 0.0;
            }
            if tau >= *times.last().unwrap() {
                return *knot_s.last().unwrap();
            }
            let k = times.partition_point(|&t| t <= tau) - 1;
            let span = times[k + 1] - times[k];
            knot_s[k] + (tau - times[k]) / span * (knot_s[k + 1] - knot_s[k])
        };

        let mut frames = Vec::with_capacity(n_frames);
        let mut last_heading = initial_heading(&path).unwrap_or(0.0);
        let fallback_edge = matched[0].2.edge_id;
        for i in 0..n_frames {
            let tau = t0 + i as f64 / frame_rate_hz;
            if tau > t_last + period + 1e-9 {
                return Err(MatchError::FrameRangeExceeded { frame: i, rate_hz: frame_rate_hz });
            }
            let (pxy, edge_id) = path.at(s_of_t(tau), fallback_edge);
            let point = self.proj.from_xy(pxy);

            let (h1, _) = path.at(s_of_t(tau - 0.5), fallback_edge);
            let (h2, _) = path.at(s_of_t(tau + 0.5), fallback_edge);
            let disp = ((h1[0] - h2[0]).powi(2) + (h1[1] - h2[1]).powi(2)).sqrt();
            if disp > 1e-3 {
                last_heading = bearing_deg(self.proj.from_xy(h1), self.proj.from_xy(h2));
            }
            frames.push(FrameFix {
                frame: i,
                lat: point.lat,
                lon: point.lon,
                edge_id,
                heading_deg: last_heading,
            });
        }
        Ok(MatchedTrace { frames })
    }
}

/// Direction of the first non-degenerate segment of the path, if any.
fn initial_heading(path: &PathAccum) -> Option<f64> {
    for w in path.pts.windows(2) {
        let (dx, dy) = (w[1][0] - w[0][0], w[1][1] - w[0][1]);
        if (dx * dx + dy * dy).sqrt() > 1e-3 {
            // Planar frame: x east, y north.
            return Some(dx.atan2(dy).to_degrees().rem_euclid(360.0));
        }
    }
    None
}
