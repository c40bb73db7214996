//! Procedural road networks, A* routing and lane-relative geometry.
//!
//! Roads are built from straight and constant-curvature segments. Every
//! directed edge carries its start heading, so an edge is fully described by
//! a start pose, a length and a signed curvature.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};
use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::vehicle::VehicleState;

pub const DEFAULT_LANE_WIDTH: f64 = 3.5;
/// Half-width of the arc-length window searched by [`Route::lane_frame`].
pub const PROJECTION_WINDOW: f64 = 10.0;
/// Straight run appended past the goal so progress can exceed `s_total`.
pub const TAIL_EXTENSION: f64 = 40.0;
const LEAD_IN: f64 = 10.0;
const NODE_TOLERANCE: f64 = 1e-6;
const GRAPH_DOCUMENT_VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum TrackError {
    #[error("infeasible graph spec: {0}")]
    InfeasibleSpec(String),
    #[error("invalid graph: {0}")]
    InvalidGraph(String),
    #[error("graph is not G1-continuous at node {node}: headings {a:.6} vs {b:.6}")]
    NotG1 { node: usize, a: f64, b: f64 },
    #[error("unknown node {0}")]
    UnknownNode(usize),
    #[error("start and goal are the same node ({0})")]
    SameEndpoints(usize),
    #[error("no route from node {start} to node {goal}")]
    NoRoute { start: usize, goal: usize },
    #[error("no start/goal pair satisfies the route constraints")]
    NoCandidatePair,
    #[error("vehicle is {distance:.2} m from the centerline, outside the corridor")]
    OutOfCorridor { distance: f64 },
    #[error("centerline fit failed: {0}")]
    Fit(String),
    #[error("route document: {0}")]
    Document(String),
}

/// Wraps an angle to (-π, π].
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    w
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

/// A straight or circular piece of centerline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start: Pose,
    pub length: f64,
    /// Signed curvature, positive for left turns.
    pub curvature: f64,
}

impl Segment {
    pub fn pose_at(&self, u: f64) -> Pose {
        let Pose { x, y, heading } = self.start;
        let k = self.curvature;
        if k == 0.0 {
            Pose { x: x + u * libm::cos(heading), y: y + u * libm::sin(heading), heading: wrap_angle(heading) }
        } else {
            let h = heading + k * u;
            Pose {
                x: x + (libm::sin(h) - libm::sin(heading)) / k,
                y: y - (libm::cos(h) - libm::cos(heading)) / k,
                heading: wrap_angle(h),
            }
        }
    }

    pub fn end(&self) -> Pose {
        self.pose_at(self.length)
    }

    /// Closest-point parameter on this segment, clamped to `[lo, hi]`.
    fn closest(&self, px: f64, py: f64, lo: f64, hi: f64) -> f64 {
        let Pose { x, y, heading } = self.start;
        let u = if self.curvature == 0.0 {
            (px - x) * libm::cos(heading) + (py - y) * libm::sin(heading)
        } else {
            let r = 1.0 / self.curvature;
            // centre sits on the left normal for positive curvature
            let cx = x - r * libm::sin(heading);
            let cy = y + r * libm::cos(heading);
            let a0 = (y - cy).atan2(x - cx);
            let ap = (py - cy).atan2(px - cx);
            let sweep = if self.curvature > 0.0 { ap - a0 } else { a0 - ap };
            let sweep = sweep.rem_euclid(2.0 * PI);
            let u = sweep * r.abs();
            let circumference = 2.0 * PI * r.abs();
            // points "behind" the start wrap to the far side of the circle
            if u > self.length && u - self.length > circumference - u {
                u - circumference
            } else {
                u
            }
        };
        u.clamp(lo, hi)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CurvatureClass {
    Straight,
    ArcLeft,
    ArcRight,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    pub class: CurvatureClass,
    /// Arc radius in meters; `None` for straights.
    pub radius: Option<f64>,
    /// Heading of travel when leaving `from`.
    pub heading: f64,
    pub length: f64,
}

impl Edge {
    pub fn curvature(&self) -> f64 {
        match (self.class, self.radius) {
            (CurvatureClass::Straight, _) => 0.0,
            (CurvatureClass::ArcLeft, Some(r)) => 1.0 / r,
            (CurvatureClass::ArcRight, Some(r)) => -1.0 / r,
            _ => f64::NAN,
        }
    }

    pub fn segment(&self, nodes: &[Node]) -> Segment {
        let n = nodes[self.from];
        Segment {
            start: Pose { x: n.x, y: n.y, heading: self.heading },
            length: self.length,
            curvature: self.curvature(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteGraph {
    pub nodes: Vec<Node>,
    pub edges: Vec<Edge>,
    pub lane_width: f64,
}

impl RouteGraph {
    /// Builds a graph and checks that every edge lands on its `to` node.
    pub fn new(nodes: Vec<Node>, edges: Vec<Edge>, lane_width: f64) -> Result<Self, TrackError> {
        if !(lane_width > 0.0 && lane_width.is_finite()) {
            return Err(TrackError::InvalidGraph(format!("lane width {lane_width} must be > 0")));
        }
        for (i, e) in edges.iter().enumerate() {
            if e.from >= nodes.len() || e.to >= nodes.len() {
                return Err(TrackError::InvalidGraph(format!("edge {i} references a missing node")));
            }
            if !(e.length > 0.0) || !e.curvature().is_finite() {
                return Err(TrackError::InvalidGraph(format!("edge {i} has invalid geometry")));
            }
            let end = e.segment(&nodes).end();
            let target = nodes[e.to];
            let miss = (end.x - target.x).hypot(end.y - target.y);
            if miss > NODE_TOLERANCE * e.length.max(1.0) {
                return Err(TrackError::InvalidGraph(format!("edge {i} ends {miss:.3e} m away from node {}", e.to)));
            }
        }
        Ok(Self { nodes, edges, lane_width })
    }

    /// Straight edge between two existing nodes, heading taken from the chord.
    pub fn straight_edge(nodes: &[Node], from: usize, to: usize) -> Edge {
        let (a, b) = (nodes[from], nodes[to]);
        Edge {
            from,
            to,
            class: CurvatureClass::Straight,
            radius: None,
            heading: (b.y - a.y).atan2(b.x - a.x),
            length: (b.x - a.x).hypot(b.y - a.y),
        }
    }

    /// Verifies that incoming and outgoing tangents agree at every node.
    pub fn check_g1(&self) -> Result<(), TrackError> {
        let mut heading_at: Vec<Option<f64>> = vec![None; self.nodes.len()];
        let mut visit = |node: usize, h: f64| -> Result<(), TrackError> {
            match heading_at[node] {
                None => {
                    heading_at[node] = Some(h);
                    Ok(())
                }
                Some(prev) if wrap_angle(prev - h).abs() < 1e-9 => Ok(()),
                Some(prev) => Err(TrackError::NotG1 { node, a: prev, b: h }),
            }
        };
        for e in &self.edges {
            visit(e.from, wrap_angle(e.heading))?;
            visit(e.to, e.segment(&self.nodes).end().heading)?;
        }
        Ok(())
    }

    /// True when the underlying undirected graph is connected.
    pub fn is_connected(&self) -> bool {
        if self.nodes.is_empty() {
            return true;
        }
        let mut adj = vec![Vec::new(); self.nodes.len()];
        for e in &self.edges {
            adj[e.from].push(e.to);
            adj[e.to].push(e.from);
        }
        let mut seen = vec![false; self.nodes.len()];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        while let Some(n) = queue.pop_front() {
            for &m in &adj[n] {
                if !seen[m] {
                    seen[m] = true;
                    queue.push_back(m);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    fn outgoing(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.nodes.len()];
        for (i, e) in self.edges.iter().enumerate() {
            out[e.from].push(i);
        }
        out
    }

    /// Minimum number of edges from `start` to every node (directed).
    pub fn hop_distances(&self, start: usize) -> Vec<Option<usize>> {
        let out = self.outgoing();
        let mut dist = vec![None; self.nodes.len()];
        dist[start] = Some(0);
        let mut queue = VecDeque::from([start]);
        while let Some(n) = queue.pop_front() {
            let d = dist[n].unwrap_or(0);
            for &ei in &out[n] {
                let m = self.edges[ei].to;
                if dist[m].is_none() {
                    dist[m] = Some(d + 1);
                    queue.push_back(m);
                }
            }
        }
        dist
    }

    pub fn to_json(&self) -> String {
        let doc = GraphDocument { version: GRAPH_DOCUMENT_VERSION, graph: self.clone() };
        serde_json::to_string_pretty(&doc).expect("graph serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, TrackError> {
        let doc: GraphDocument = serde_json::from_str(text).map_err(|e| TrackError::Document(e.to_string()))?;
        if doc.version != GRAPH_DOCUMENT_VERSION {
            return Err(TrackError::Document(format!("unsupported version {}", doc.version)));
        }
        let g = doc.graph;
        RouteGraph::new(g.nodes, g.edges, g.lane_width)
    }
}

#[derive(Serialize, Deserialize)]
struct GraphDocument {
    version: u32,
    graph: RouteGraph,
}

/// Size and shape parameters for [`generate_graph`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GraphSpec {
    pub nodes: usize,
    pub lane_width: f64,
    pub p_straight: f64,
    pub straight_length: (f64, f64),
    pub arc_radius: (f64, f64),
    pub arc_sweep: (f64, f64),
    /// Probability of each bypass loop that parallels a straight edge.
    pub p_bypass: f64,
}

impl Default for GraphSpec {
    fn default() -> Self {
        Self {
            nodes: 12,
            lane_width: DEFAULT_LANE_WIDTH,
            p_straight: 0.4,
            straight_length: (30.0, 80.0),
            arc_radius: (30.0, 90.0),
            arc_sweep: (0.4, 1.4),
            p_bypass: 0.3,
        }
    }
}

impl GraphSpec {
    fn validate(&self) -> Result<(), TrackError> {
        let bad = |m: &str| Err(TrackError::InfeasibleSpec(m.to_string()));
        if self.nodes < 4 {
            return bad("at least 4 nodes are required");
        }
        if !(self.lane_width > 0.0) {
            return bad("lane width must be > 0");
        }
        let ranges = [self.straight_length, self.arc_radius, self.arc_sweep];
        if ranges.iter().any(|&(lo, hi)| !(lo > 0.0 && hi >= lo)) {
            return bad("length, radius and sweep ranges must be positive and ordered");
        }
        if self.arc_sweep.1 >= PI {
            return bad("arc sweep must stay below π");
        }
        if !(0.0..=1.0).contains(&self.p_straight) || !(0.0..=1.0).contains(&self.p_bypass) {
            return bad("probabilities must lie in [0, 1]");
        }
        Ok(())
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Generates a winding one-way road with optional bypass loops.
///
/// The main road is a chain of straight and arc edges; a bypass replaces a
/// straight edge by four arcs (left, right, right, left or mirrored) that
/// leave and rejoin the road tangentially, so the graph offers genuine route
/// alternatives while staying G1-continuous.
pub fn generate_graph(seed: u64, spec: &GraphSpec) -> Result<RouteGraph, TrackError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let max_bypasses = (spec.nodes - 4) / 3;
    let mut bypasses = (0..max_bypasses).filter(|_| rng.random_bool(spec.p_bypass)).count();
    let chain_edges = loop {
        let chain_edges = spec.nodes - 1 - 3 * bypasses;
        if chain_edges >= bypasses.max(1) + 2 {
            break chain_edges;
        }
        bypasses -= 1;
    };

    let mut classes: Vec<CurvatureClass> = (0..chain_edges)
        .map(|_| {
            if rng.random_bool(spec.p_straight) {
                CurvatureClass::Straight
            } else if rng.random_bool(0.5) {
                CurvatureClass::ArcLeft
            } else {
                CurvatureClass::ArcRight
            }
        })
        .collect();
    // force the required mix onto distinct shuffled positions
    let mut slots: Vec<usize> = (0..chain_edges).collect();
    slots.shuffle(&mut rng);
    let mut required = vec![CurvatureClass::ArcLeft, CurvatureClass::ArcRight];
    required.extend(std::iter::repeat_n(CurvatureClass::Straight, bypasses.max(1)));
    let count = |cs: &[CurvatureClass], c| cs.iter().filter(|&&x| x == c).count();
    let needed: Vec<(CurvatureClass, usize)> =
        [(CurvatureClass::Straight, bypasses.max(1)), (CurvatureClass::ArcLeft, 1), (CurvatureClass::ArcRight, 1)]
            .into_iter()
            .filter(|&(c, n)| count(&classes, c) < n)
            .collect();
    if !needed.is_empty() {
        for (slot, class) in slots.iter().zip(required.iter()) {
            classes[*slot] = *class;
        }
    }

    let mut nodes = vec![Node { x: 0.0, y: 0.0 }];
    let mut edges = Vec::new();
    let mut heading = 0.0f64;
    for class in classes {
        let from = nodes.len() - 1;
        let (radius, length) = match class {
            CurvatureClass::Straight => (None, uniform(&mut rng, spec.straight_length)),
            _ => {
                let r = uniform(&mut rng, spec.arc_radius);
                (Some(r), r * uniform(&mut rng, spec.arc_sweep))
            }
        };
        let edge = Edge { from, to: from + 1, class, radius, heading, length };
        let end = edge.segment(&nodes).end();
        nodes.push(Node { x: end.x, y: end.y });
        heading = end.heading;
        edges.push(edge);
    }

    let mut straights: Vec<usize> =
        edges.iter().enumerate().filter(|(_, e)| e.class == CurvatureClass::Straight).map(|(i, _)| i).collect();
    straights.shuffle(&mut rng);
    for &ei in straights.iter().take(bypasses) {
        let base = edges[ei].clone();
        let sweep = uniform(&mut rng, (0.25, 0.45));
        let radius = base.length / (4.0 * libm::sin(sweep));
        let left_first = rng.random_bool(0.5);
        let (first, second) = if left_first {
            (CurvatureClass::ArcLeft, CurvatureClass::ArcRight)
        } else {
            (CurvatureClass::ArcRight, CurvatureClass::ArcLeft)
        };
        let pattern = [first, second, second, first];
        let mut from = base.from;
        let mut h = base.heading;
        for (k, class) in pattern.into_iter().enumerate() {
            let to = if k == 3 { base.to } else { nodes.len() };
            let edge = Edge { from, to, class, radius: Some(radius), heading: h, length: radius * sweep };
            let end = edge.segment(&nodes).end();
            if k < 3 {
                nodes.push(Node { x: end.x, y: end.y });
            }
            h = end.heading;
            from = to;
            edges.push(edge);
        }
    }

    let graph = RouteGraph::new(nodes, edges, spec.lane_width)?;
    debug_assert_eq!(graph.nodes.len(), spec.nodes);
    graph.check_g1()?;
    Ok(graph)
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Frontier {
    f: f64,
    node: usize,
}

impl Eq for Frontier {}

impl Ord for Frontier {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap on f, ties broken by node id for determinism
        other.f.total_cmp(&self.f).then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for Frontier {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// A* over arc length with the straight-line distance heuristic.
pub fn plan_route(graph: &RouteGraph, start: usize, goal: usize) -> Result<Route, TrackError> {
    let n = graph.nodes.len();
    for id in [start, goal] {
        if id >= n {
            return Err(TrackError::UnknownNode(id));
        }
    }
    if start == goal {
        return Err(TrackError::SameEndpoints(start));
    }
    let goal_pos = graph.nodes[goal];
    let heuristic = |i: usize| {
        let p = graph.nodes[i];
        (p.x - goal_pos.x).hypot(p.y - goal_pos.y)
    };
    let out = graph.outgoing();
    let mut cost = vec![f64::INFINITY; n];
    let mut via: Vec<Option<usize>> = vec![None; n];
    let mut closed = vec![false; n];
    let mut open = BinaryHeap::new();
    cost[start] = 0.0;
    open.push(Frontier { f: heuristic(start), node: start });
    while let Some(Frontier { node, .. }) = open.pop() {
        if closed[node] {
            continue;
        }
        if node == goal {
            break;
        }
        closed[node] = true;
        for &ei in &out[node] {
            let e = &graph.edges[ei];
            let g = cost[node] + e.length;
            if g < cost[e.to] {
                cost[e.to] = g;
                via[e.to] = Some(ei);
                open.push(Frontier { f: g + heuristic(e.to), node: e.to });
            }
        }
    }
    if !cost[goal].is_finite() {
        return Err(TrackError::NoRoute { start, goal });
    }
    let mut path = Vec::new();
    let mut at = goal;
    while at != start {
        let ei = via[at].expect("predecessor recorded for reached node");
        path.push(ei);
        at = graph.edges[ei].from;
    }
    path.reverse();
    Ok(Route::from_edges(graph, path, start, goal))
}

/// Picks a start/goal pair uniformly among pairs that are reachable, at
/// least `min_hops` edges apart and whose shortest route is at least
/// `min_length` meters long, then plans it.
pub fn sample_route<R: Rng>(
    graph: &RouteGraph,
    rng: &mut R,
    min_hops: usize,
    min_length: f64,
) -> Result<Route, TrackError> {
    let mut pairs = Vec::new();
    for s in 0..graph.nodes.len() {
        for (g, hops) in graph.hop_distances(s).into_iter().enumerate() {
            if matches!(hops, Some(h) if h >= min_hops.max(1)) {
                pairs.push((s, g));
            }
        }
    }
    let mut routes = Vec::new();
    for (s, g) in pairs {
        let route = plan_route(graph, s, g)?;
        if route.s_total >= min_length {
            routes.push(route);
        }
    }
    if routes.is_empty() {
        return Err(TrackError::NoCandidatePair);
    }
    let i = rng.random_range(0..routes.len());
    Ok(routes.swap_remove(i))
}

/// Signed lane-relative error of the vehicle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LaneFrameError {
    /// Lateral deviation, positive to the left of the centerline.
    pub d: f64,
    /// Heading error wrapped to (-π, π].
    pub phi: f64,
    /// Arc-length progress along the route.
    pub s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Route {
    pub edges: Vec<usize>,
    pub start: usize,
    pub goal: usize,
    pub s_total: f64,
    pub lane_width: f64,
    /// Centerline pieces with their starting arc length, including a
    /// lead-in before the start and a straight tail past the goal.
    pub segments: Vec<(f64, Segment)>,
}

impl Route {
    pub fn from_edges(graph: &RouteGraph, edges: Vec<usize>, start: usize, goal: usize) -> Self {
        let mut segments = Vec::with_capacity(edges.len() + 2);
        let mut s = 0.0;
        for &ei in &edges {
            let seg = graph.edges[ei].segment(&graph.nodes);
            segments.push((s, seg));
            s += seg.length;
        }
        let s_total = s;
        let first = segments.first().map(|(_, seg)| seg.start).unwrap_or(Pose {
            x: graph.nodes[start].x,
            y: graph.nodes[start].y,
            heading: 0.0,
        });
        let lead = Segment {
            start: Pose {
                x: first.x - LEAD_IN * libm::cos(first.heading),
                y: first.y - LEAD_IN * libm::sin(first.heading),
                heading: first.heading,
            },
            length: LEAD_IN,
            curvature: 0.0,
        };
        segments.insert(0, (-LEAD_IN, lead));
        let last = segments.last().map(|(_, seg)| seg.end()).unwrap_or(first);
        segments.push((s_total, Segment { start: last, length: TAIL_EXTENSION, curvature: 0.0 }));
        Self { edges, start, goal, s_total, lane_width: graph.lane_width, segments }
    }

    /// A single straight route, handy for tests and the easy regime.
    pub fn straight(length: f64, lane_width: f64) -> Self {
        let nodes = vec![Node { x: 0.0, y: 0.0 }, Node { x: length, y: 0.0 }];
        let edge = RouteGraph::straight_edge(&nodes, 0, 1);
        let graph = RouteGraph::new(nodes, vec![edge], lane_width).expect("valid straight graph");
        Route::from_edges(&graph, vec![0], 0, 1)
    }

    fn segment_at(&self, s: f64) -> (f64, &Segment) {
        let idx = self.segments.partition_point(|(s0, _)| *s0 <= s).saturating_sub(1);
        let (s0, seg) = &self.segments[idx];
        (*s0, seg)
    }

    /// Centerline pose at arc length `s`, extrapolating past either end.
    pub fn pose_at(&self, s: f64) -> Pose {
        let (s0, seg) = self.segment_at(s);
        seg.pose_at(s - s0)
    }

    pub fn curvature_at(&self, s: f64) -> f64 {
        self.segment_at(s).1.curvature
    }

    /// Projects a planar pose onto the centerline.
    ///
    /// Only the window `s_hint ± PROJECTION_WINDOW` is searched; among equally
    /// close candidates the larger arc length wins.
    pub fn project(&self, x: f64, y: f64, yaw: f64, s_hint: f64) -> Result<LaneFrameError, TrackError> {
        let lo = s_hint - PROJECTION_WINDOW;
        let hi = s_hint + PROJECTION_WINDOW;
        let mut best: Option<(f64, f64)> = None; // (distance, s)
        for (s0, seg) in &self.segments {
            let (a, b) = (*s0, *s0 + seg.length);
            if b < lo || a > hi {
                continue;
            }
            let u = seg.closest(x, y, lo.max(a) - a, hi.min(b) - a);
            let p = seg.pose_at(u);
            let dist = (x - p.x).hypot(y - p.y);
            let s = a + u;
            best = match best {
                Some((bd, bs)) if bd < dist - 1e-12 || (dist - bd).abs() <= 1e-12 && bs >= s => Some((bd, bs)),
                _ => Some((dist, s)),
            };
        }
        let (dist, s) = best.ok_or(TrackError::OutOfCorridor { distance: f64::INFINITY })?;
        if dist > 3.0 * self.lane_width {
            return Err(TrackError::OutOfCorridor { distance: dist });
        }
        let c = self.pose_at(s);
        let d = -(x - c.x) * libm::sin(c.heading) + (y - c.y) * libm::cos(c.heading);
        Ok(LaneFrameError { d, phi: wrap_angle(yaw - c.heading), s })
    }

    pub fn lane_frame(&self, state: &VehicleState, s_hint: f64) -> Result<LaneFrameError, TrackError> {
        self.project(state.x, state.y, state.yaw, s_hint)
    }

    /// Centerline points ahead of the vehicle in its own frame
    /// (x forward, y left), sampled every `spacing` meters of arc length.
    pub fn centerline_in_vehicle_frame(
        &self,
        state: &VehicleState,
        s_from: f64,
        depth: f64,
        spacing: f64,
    ) -> Vec<(f64, f64)> {
        let (sin, cos) = (libm::sin(state.yaw), libm::cos(state.yaw));
        let n = (depth / spacing).ceil() as usize;
        (0..=n)
            .map(|k| {
                let p = self.pose_at(s_from + k as f64 * spacing);
                let (dx, dy) = (p.x - state.x, p.y - state.y);
                (dx * cos + dy * sin, -dx * sin + dy * cos)
            })
            .collect()
    }

    pub fn to_json(&self, graph: &RouteGraph) -> String {
        let doc = RouteDocument {
            version: GRAPH_DOCUMENT_VERSION,
            graph: graph.clone(),
            edges: self.edges.clone(),
            start: self.start,
            goal: self.goal,
            s_total: self.s_total,
        };
        serde_json::to_string_pretty(&doc).expect("route serializes")
    }

    pub fn from_json(text: &str) -> Result<(RouteGraph, Route), TrackError> {
        let doc: RouteDocument = serde_json::from_str(text).map_err(|e| TrackError::Document(e.to_string()))?;
        if doc.version != GRAPH_DOCUMENT_VERSION {
            return Err(TrackError::Document(format!("unsupported version {}", doc.version)));
        }
        let graph = RouteGraph::new(doc.graph.nodes, doc.graph.edges, doc.graph.lane_width)?;
        for w in doc.edges.windows(2) {
            if graph.edges.get(w[0]).map(|e| e.to) != graph.edges.get(w[1]).map(|e| e.from) {
                return Err(TrackError::Document("route edges are not consecutive".into()));
            }
        }
        if doc.edges.iter().any(|&e| e >= graph.edges.len()) {
            return Err(TrackError::Document("route references a missing edge".into()));
        }
        let route = Route::from_edges(&graph, doc.edges, doc.start, doc.goal);
        if (route.s_total - doc.s_total).abs() > 1e-6 {
            return Err(TrackError::Document("s_total does not match edge lengths".into()));
        }
        Ok((graph, route))
    }
}

#[derive(Serialize, Deserialize)]
struct RouteDocument {
    version: u32,
    graph: RouteGraph,
    edges: Vec<usize>,
    start: usize,
    goal: usize,
    s_total: f64,
}

/// Cubic lateral-offset polynomial in the vehicle frame.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CenterlineCoeffs {
    pub c0: f64,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
}

impl CenterlineCoeffs {
    pub fn as_array(&self) -> [f64; 4] {
        [self.c0, self.c1, self.c2, self.c3]
    }

    pub fn from_array(c: [f64; 4]) -> Self {
        Self { c0: c[0], c1: c[1], c2: c[2], c3: c[3] }
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.c0 + x * (self.c1 + x * (self.c2 + x * self.c3))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CenterlineFit {
    pub coeffs: CenterlineCoeffs,
    pub residual_rms: f64,
}

pub const MIN_FIT_SAMPLES: usize = 8;
pub const MIN_FIT_SPAN: f64 = 5.0;

/// Least-squares cubic through vehicle-frame samples.
pub fn fit_centerline(points: &[(f64, f64)]) -> Result<CenterlineFit, TrackError> {
    if points.len() < MIN_FIT_SAMPLES {
        return Err(TrackError::Fit(format!("need ≥ {MIN_FIT_SAMPLES} samples, got {}", points.len())));
    }
    if points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(TrackError::Fit("non-finite sample".into()));
    }
    if points.windows(2).any(|w| w[1].0 <= w[0].0) {
        return Err(TrackError::Fit("x must be strictly increasing".into()));
    }
    let span = points[points.len() - 1].0 - points[0].0;
    if span < MIN_FIT_SPAN {
        return Err(TrackError::Fit(format!("samples span {span:.2} m < {MIN_FIT_SPAN} m")));
    }
    // scale x to O(1) before building the Vandermonde matrix
    let scale = points.iter().map(|p| p.0.abs()).fold(0.0, f64::max).max(1.0);
    let design = DMatrix::from_fn(points.len(), 4, |i, j| (points[i].0 / scale).powi(j as i32));
    let target = DVector::from_iterator(points.len(), points.iter().map(|p| p.1));
    let svd = design.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smin > smax * 1e-12) {
        return Err(TrackError::Fit("rank-deficient design matrix".into()));
    }
    let scaled = svd.solve(&target, 0.0).map_err(|e| TrackError::Fit(e.to_string()))?;
    let c: Vec<f64> = (0..4).map(|j| scaled[j] / scale.powi(j as i32)).collect();
    let residual = &design * &scaled - &target;
    let residual_rms = (residual.norm_squared() / points.len() as f64).sqrt();
    Ok(CenterlineFit { coeffs: CenterlineCoeffs::from_array([c[0], c[1], c[2], c[3]]), residual_rms })
}

pub const LABEL_DEPTH: f64 = 20.0;

/// Ground-truth centerline label for the view ahead of the vehicle.
pub fn centerline_label(route: &Route, state: &VehicleState, s: f64) -> Result<CenterlineFit, TrackError> {
    let pts: Vec<(f64, f64)> = route
        .centerline_in_vehicle_frame(state, s - 2.0, LABEL_DEPTH + 10.0, 0.5)
        .into_iter()
        .filter(|&(x, _)| (0.0..=LABEL_DEPTH).contains(&x))
        .collect();
    let mut monotone: Vec<(f64, f64)> = Vec::with_capacity(pts.len());
    for p in pts {
        if monotone.last().is_none_or(|q| p.0 > q.0) {
            monotone.push(p);
        }
    }
    let fit = fit_centerline(&monotone)?;
    if fit.coeffs.c0.abs() > route.lane_width {
        return Err(TrackError::Fit(format!("offset {:.2} m exceeds the lane width", fit.coeffs.c0)));
    }
    Ok(fit)
}
