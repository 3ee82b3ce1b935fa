//! OpenStreetMap XML parsing and the drivable street graph.
//!
//! Parsing is a two-phase pass over the document: first collect node
//! coordinates and way skeletons, then resolve node references and keep only
//! ways whose `highway` tag is in the drivable allow-list. Kept ways are
//! split into edges at intersection nodes (way endpoints and any node shared
//! by more than one position across the kept ways), so edges meet exactly at
//! graph nodes and shortest-path routing sees real connectivity.
//!
//! Malformed references degrade gracefully: a way pointing at a node the
//! document never defines is dropped with a warning and counted in
//! [`ParseStats`], it does not abort the parse.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use quick_xml::events::Event;
use quick_xml::Reader;
use serde::{Deserialize, Serialize};

use crate::geo::{haversine_m, BBox, GeoError, GeoPoint, LocalProjection};

pub type NodeId = i64;
pub type EdgeId = u64;

/// Highway classes considered drivable by a passenger car.
pub const DRIVABLE_HIGHWAYS: [&str; 14] = [
    "motorway",
    "trunk",
    "primary",
    "secondary",
    "tertiary",
    "unclassified",
    "residential",
    "service",
    "living_street",
    "motorway_link",
    "trunk_link",
    "primary_link",
    "secondary_link",
    "tertiary_link",
];

pub fn is_drivable_highway(class: &str) -> bool {
    DRIVABLE_HIGHWAYS.contains(&class)
}

#[derive(Debug, thiserror::Error)]
pub enum GraphError {
    #[error("XML error at line {line}: {message}")]
    Xml { line: usize, message: String },
    #[error("document contains no drivable ways")]
    NoDrivableWays,
    #[error("node {id}: {source}")]
    BadNode { id: NodeId, source: GeoError },
    #[error("crop route must contain at least one point")]
    EmptyRoute,
    #[error("crop offset {0} m outside [0, 10000]")]
    OffsetOutOfRange(f64),
    #[error("graph invariant violated: {0}")]
    Invariant(String),
    #[error("JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("I/O: {0}")]
    Io(#[from] std::io::Error),
}

/// One drivable street segment between two graph nodes.
///
/// `geometry` runs from the coordinate of `from` to the coordinate of `to`
/// and may contain interior shape points that are not graph nodes. When
/// `oneway` is set the edge is traversable in geometry order only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreetEdge {
    pub id: EdgeId,
    pub from: NodeId,
    pub to: NodeId,
    pub highway: String,
    pub oneway: bool,
    pub geometry: Vec<GeoPoint>,
}

/// Drivable street network with endpoint nodes, edges and a bounding box
/// covering every geometry point.
#[derive(Debug, Clone, PartialEq)]
pub struct StreetGraph {
    nodes: BTreeMap<NodeId, GeoPoint>,
    edges: Vec<StreetEdge>,
    bbox: BBox,
}

/// Counters describing what the parser kept and dropped.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParseStats {
    pub nodes_total: usize,
    pub ways_total: usize,
    pub ways_drivable: usize,
    pub ways_dropped_missing_node: usize,
    pub ways_dropped_degenerate: usize,
    pub duplicate_points_dropped: usize,
}

#[derive(Debug)]
pub struct ParsedOsm {
    pub graph: StreetGraph,
    pub stats: ParseStats,
}

// ---------------------------------------------------------------------------
// parsing

#[derive(Default)]
struct WayAcc {
    refs: Vec<NodeId>,
    highway: Option<String>,
    oneway: Option<String>,
}

struct ResolvedWay {
    points: Vec<(NodeId, GeoPoint)>,
    highway: String,
    oneway: bool,
}

fn line_at(xml: &[u8], byte_pos: usize) -> usize {
    1 + xml[..byte_pos.min(xml.len())].iter().filter(|&&b| b == b'\n').count()
}

fn attr_num<T: std::str::FromStr>(raw: &[u8]) -> Option<T> {
    std::str::from_utf8(raw).ok()?.trim().parse().ok()
}

/// Parse OSM XML into a street graph. Fails if the document is not
/// well-formed XML or contains no usable drivable way.
pub fn parse_osm(xml: &[u8]) -> Result<ParsedOsm, GraphError> {
    let mut reader = Reader::from_reader(xml);
    let xml_err = |reader: &Reader<&[u8]>, message: String| GraphError::Xml {
        line: line_at(xml, reader.buffer_position() as usize),
        message,
    };

    let mut all_nodes: HashMap<NodeId, GeoPoint> = HashMap::new();
    let mut stats = ParseStats::default();
    let mut ways: Vec<ResolvedWay> = Vec::new();
    let mut current: Option<WayAcc> = None;
    let mut buf = Vec::new();

    // Finishes the way that just closed: highway filter, reference
    // resolution, consecutive-duplicate removal, oneway normalization.
    let mut finish_way = |acc: WayAcc, stats: &mut ParseStats, nodes: &HashMap<NodeId, GeoPoint>| {
        stats.ways_total += 1;
        let highway = match acc.highway {
            Some(h) if is_drivable_highway(&h) => h,
            _ => return,
        };
        stats.ways_drivable += 1;

        let mut points = Vec::with_capacity(acc.refs.len());
        for id in &acc.refs {
            match nodes.get(id) {
                Some(&p) => points.push((*id, p)),
                None => {
                    log::warn!("dropping way: node {id} is not defined in the document");
                    stats.ways_dropped_missing_node += 1;
                    return;
                }
            }
        }
        let before = points.len();
        points.dedup_by(|a, b| a.1 == b.1);
        stats.duplicate_points_dropped += before - points.len();
        if points.len() < 2 {
            stats.ways_dropped_degenerate += 1;
            return;
        }
        let oneway = match acc.oneway.as_deref() {
            Some("yes") | Some("true") | Some("1") => true,
            Some("-1") | Some("reverse") => {
                points.reverse();
                true
            }
            _ => false,
        };
        ways.push(ResolvedWay { points, highway, oneway });
    };

    loop {
        let ev = reader
            .read_event_into(&mut buf)
            .map_err(|e| xml_err(&reader, e.to_string()))?;
        match ev {
            Event::Start(ref e) | Event::Empty(ref e) => {
                let empty = matches!(ev, Event::Empty(_));
                match e.local_name().as_ref() {
                    b"node" => {
                        let (mut id, mut lat, mut lon) = (None, None, None);
                        for a in e.attributes() {
                            let a = a.map_err(|err| xml_err(&reader, err.to_string()))?;
                            match a.key.as_ref() {
                                b"id" => id = attr_num::<i64>(&a.value),
                                b"lat" => lat = attr_num::<f64>(&a.value),
                                b"lon" => lon = attr_num::<f64>(&a.value),
                                _ => {}
                            }
                        }
                        if let (Some(id), Some(lat), Some(lon)) = (id, lat, lon) {
                            let p = GeoPoint::new(lat, lon)
                                .map_err(|source| GraphError::BadNode { id, source })?;
                            all_nodes.insert(id, p);
                            stats.nodes_total += 1;
                        }
                    }
                    b"way" => {
                        if empty {
                            finish_way(WayAcc::default(), &mut stats, &all_nodes);
                        } else {
                            current = Some(WayAcc::default());
                        }
                    }
                    b"nd" => {
                        if let Some(w) = current.as_mut() {
                            for a in e.attributes() {
                                let a = a.map_err(|err| xml_err(&reader, err.to_string()))?;
                                if a.key.as_ref() == b"ref" {
                                    if let Some(r) = attr_num::<i64>(&a.value) {
                                        w.refs.push(r);
                                    }
                                }
                            }
                        }
                    }
                    b"tag" => {
                        if let Some(w) = current.as_mut() {
                            let (mut k, mut v) = (None, None);
                            for a in e.attributes() {
                                let a = a.map_err(|err| xml_err(&reader, err.to_string()))?;
                                let val = a
                                    .unescape_value()
                                    .map_err(|err| xml_err(&reader, err.to_string()))?
                                    .into_owned();
                                match a.key.as_ref() {
                                    b"k" => k = Some(val),
                                    b"v" => v = Some(val),
                                    _ => {}
                                }
                            }
                            match (k.as_deref(), v) {
                                (Some("highway"), Some(v)) => w.highway = Some(v),
                                (Some("oneway"), Some(v)) => w.oneway = Some(v),
                                _ => {}
                            }
                        }
                    }
                    _ => {}
                }
            }
            Event::End(ref e) if e.local_name().as_ref() == b"way" => {
                if let Some(acc) = current.take() {
                    finish_way(acc, &mut stats, &all_nodes);
                }
            }
            Event::Eof => break,
            _ => {}
        }
        buf.clear();
    }

    let graph = build_graph(&ways)?;
    log::info!(
        "parsed OSM: {} nodes, {} ways ({} drivable) -> {} edges, {} graph nodes; \
         dropped {} ways with missing nodes, {} degenerate, {} duplicate points",
        stats.nodes_total,
        stats.ways_total,
        stats.ways_drivable,
        graph.edges.len(),
        graph.nodes.len(),
        stats.ways_dropped_missing_node,
        stats.ways_dropped_degenerate,
        stats.duplicate_points_dropped,
    );
    Ok(ParsedOsm { graph, stats })
}

pub fn parse_osm_file<P: AsRef<Path>>(path: P) -> Result<ParsedOsm, GraphError> {
    parse_osm(&std::fs::read(path)?)
}

/// Split resolved ways into edges at intersection nodes and assemble the
/// graph. A node is an intersection if it is a way endpoint or appears more
/// than once across all kept ways (including twice within one way).
fn build_graph(ways: &[ResolvedWay]) -> Result<StreetGraph, GraphError> {
    let mut use_count: HashMap<NodeId, u32> = HashMap::new();
    for w in ways {
        for &(id, _) in &w.points {
            *use_count.entry(id).or_insert(0) += 1;
        }
    }

    let mut nodes = BTreeMap::new();
    let mut edges = Vec::new();
    for w in ways {
        let last = w.points.len() - 1;
        let mut start = 0usize;
        for i in 1..=last {
            let is_cut = i == last || use_count[&w.points[i].0] >= 2;
            if !is_cut {
                continue;
            }
            let seg = &w.points[start..=i];
            nodes.insert(seg[0].0, seg[0].1);
            nodes.insert(seg[seg.len() - 1].0, seg[seg.len() - 1].1);
            edges.push(StreetEdge {
                id: edges.len() as EdgeId,
                from: seg[0].0,
                to: seg[seg.len() - 1].0,
                highway: w.highway.clone(),
                oneway: w.oneway,
                geometry: seg.iter().map(|&(_, p)| p).collect(),
            });
            start = i;
        }
    }
    if edges.is_empty() {
        return Err(GraphError::NoDrivableWays);
    }
    let bbox = BBox::from_points(edges.iter().flat_map(|e| e.geometry.iter().copied()))
        .expect("edges are non-empty");
    StreetGraph::checked(nodes, edges, bbox)
}

// ---------------------------------------------------------------------------
// graph

impl StreetGraph {
    /// Validating constructor; used by the parser, the JSON loader and the
    /// crop so every `StreetGraph` in the program upholds the same
    /// invariants. An empty edge set is allowed only with an explicit bbox
    /// (a crop may legitimately select nothing).
    fn checked(
        nodes: BTreeMap<NodeId, GeoPoint>,
        edges: Vec<StreetEdge>,
        bbox: BBox,
    ) -> Result<Self, GraphError> {
        let inv = |msg: String| Err(GraphError::Invariant(msg));
        for w in edges.windows(2) {
            if w[0].id >= w[1].id {
                return inv(format!("edge ids not strictly increasing at {}", w[1].id));
            }
        }
        for e in &edges {
            if e.geometry.len() < 2 {
                return inv(format!("edge {} has fewer than 2 geometry points", e.id));
            }
            if !is_drivable_highway(&e.highway) {
                return inv(format!("edge {} has non-drivable class {}", e.id, e.highway));
            }
            for p in &e.geometry {
                GeoPoint::new(p.lat, p.lon)
                    .map_err(|g| GraphError::Invariant(format!("edge {}: {g}", e.id)))?;
                if !bbox.contains(*p) {
                    return inv(format!("edge {} geometry escapes the bbox", e.id));
                }
            }
            match (nodes.get(&e.from), nodes.get(&e.to)) {
                (Some(&f), Some(&t)) => {
                    if e.geometry[0] != f || *e.geometry.last().unwrap() != t {
                        return inv(format!("edge {} geometry does not meet its endpoints", e.id));
                    }
                }
                _ => return inv(format!("edge {} references an unknown node", e.id)),
            }
        }
        Ok(Self { nodes, edges, bbox })
    }

    pub fn nodes(&self) -> &BTreeMap<NodeId, GeoPoint> {
        &self.nodes
    }

    pub fn edges(&self) -> &[StreetEdge] {
        &self.edges
    }

    pub fn edge(&self, id: EdgeId) -> Option<&StreetEdge> {
        self.edges.binary_search_by_key(&id, |e| e.id).ok().map(|i| &self.edges[i])
    }

    pub fn bbox(&self) -> &BBox {
        &self.bbox
    }

    /// Planar projection centered on the graph bbox; all planar computations
    /// on one graph share this projection.
    pub fn local_projection(&self) -> LocalProjection {
        LocalProjection::centered_on(&self.bbox)
    }

    /// Restrict the graph to the area a route passes through: the route
    /// bounding box padded by `offset_m` meters. An edge survives if any of
    /// its geometry points lies inside the padded box; its record is copied
    /// unchanged. The result bbox also covers overhanging geometry of
    /// retained edges so the bbox invariant still holds.
    pub fn crop_to_route(&self, route: &[GeoPoint], offset_m: f64) -> Result<StreetGraph, GraphError> {
        if route.is_empty() {
            return Err(GraphError::EmptyRoute);
        }
        if !(0.0..=10_000.0).contains(&offset_m) {
            return Err(GraphError::OffsetOutOfRange(offset_m));
        }
        let keep = BBox::from_points(route.iter().copied())
            .expect("route is non-empty")
            .expanded(offset_m);

        let edges: Vec<StreetEdge> = self
            .edges
            .iter()
            .filter(|e| e.geometry.iter().any(|&p| keep.contains(p)))
            .cloned()
            .collect();
        let mut bbox = keep;
        let mut nodes = BTreeMap::new();
        for e in &edges {
            nodes.insert(e.from, self.nodes[&e.from]);
            nodes.insert(e.to, self.nodes[&e.to]);
            for &p in &e.geometry {
                bbox = bbox.union(&BBox { min_lat: p.lat, min_lon: p.lon, max_lat: p.lat, max_lon: p.lon, offset_m: 0.0 });
            }
        }
        bbox.offset_m = keep.offset_m;
        Self::checked(nodes, edges, bbox)
    }
}

// ---------------------------------------------------------------------------
// point-to-edge projection

/// Result of snapping a point onto an edge.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgeProjection {
    /// Great-circle distance from the query to the snapped point, meters.
    pub distance_m: f64,
    /// Snapped point on the edge polyline.
    pub point: GeoPoint,
    /// Planar arc length from the geometry start to the snapped point.
    pub offset_m: f64,
}

/// Snap `point` onto the nearest location of `edge` under the planar
/// projection. Ties between segments keep the earlier segment.
pub fn project_point_to_edge(
    edge: &StreetEdge,
    point: GeoPoint,
    proj: &LocalProjection,
) -> EdgeProjection {
    let q = proj.to_xy(point);
    let mut best = (f64::INFINITY, [0.0, 0.0], 0.0);
    let mut cum = 0.0;
    for w in edge.geometry.windows(2) {
        let a = proj.to_xy(w[0]);
        let b = proj.to_xy(w[1]);
        let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
        let len2 = dx * dx + dy * dy;
        let t = if len2 > 0.0 {
            (((q[0] - a[0]) * dx + (q[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let s = [a[0] + t * dx, a[1] + t * dy];
        let d2 = (q[0] - s[0]).powi(2) + (q[1] - s[1]).powi(2);
        if d2 < best.0 {
            best = (d2, s, cum + t * len2.sqrt());
        }
        cum += len2.sqrt();
    }
    let snapped = proj.from_xy(best.1);
    EdgeProjection {
        distance_m: haversine_m(point, snapped),
        point: snapped,
        offset_m: best.2,
    }
}

/// Planar length of an edge polyline in meters.
pub fn edge_length_m(edge: &StreetEdge, proj: &LocalProjection) -> f64 {
    edge.geometry
        .windows(2)
        .map(|w| {
            let a = proj.to_xy(w[0]);
            let b = proj.to_xy(w[1]);
            ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
        })
        .sum()
}

// ---------------------------------------------------------------------------
// JSON serialization

#[derive(Serialize, Deserialize)]
struct NodeDoc {
    id: NodeId,
    lat: f64,
    lon: f64,
}

#[derive(Serialize, Deserialize)]
struct EdgeDoc {
    id: EdgeId,
    from: NodeId,
    to: NodeId,
    highway: String,
    oneway: bool,
    geometry: Vec<[f64; 2]>,
}

#[derive(Serialize, Deserialize)]
struct GraphDoc {
    nodes: Vec<NodeDoc>,
    edges: Vec<EdgeDoc>,
    bbox: BBox,
}

impl StreetGraph {
    pub fn to_json(&self) -> String {
        let doc = GraphDoc {
            nodes: self
                .nodes
                .iter()
                .map(|(&id, p)| NodeDoc { id, lat: p.lat, lon: p.lon })
                .collect(),
            edges: self
                .edges
                .iter()
                .map(|e| EdgeDoc {
                    id: e.id,
                    from: e.from,
                    to: e.to,
                    highway: e.highway.clone(),
                    oneway: e.oneway,
                    geometry: e.geometry.iter().map(|p| [p.lat, p.lon]).collect(),
                })
                .collect(),
            bbox: self.bbox,
        };
        serde_json::to_string_pretty(&doc).expect("graph serialization cannot fail")
    }

    pub fn from_json(json: &str) -> Result<Self, GraphError> {
        let doc: GraphDoc = serde_json::from_str(json)?;
        let nodes = doc.nodes.into_iter().map(|n| (n.id, GeoPoint { lat: n.lat, lon: n.lon })).collect();
        let edges = doc
            .edges
            .into_iter()
            .map(|e| StreetEdge {
                id: e.id,
                from: e.from,
                to: e.to,
                highway: e.highway,
                oneway: e.oneway,
                geometry: e.geometry.iter().map(|&[lat, lon]| GeoPoint { lat, lon }).collect(),
            })
            .collect();
        Self::checked(nodes, edges, doc.bbox)
    }

    pub fn save_json<P: AsRef<Path>>(&self, path: P) -> Result<(), GraphError> {
        Ok(std::fs::write(path, self.to_json())?)
    }

    pub fn load_json<P: AsRef<Path>>(path: P) -> Result<Self, GraphError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
