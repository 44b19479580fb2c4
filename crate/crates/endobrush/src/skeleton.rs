//! Centerline skeletons for tubular meshes, plus farthest-point downsampling
//! of camera stations.
//!
//! The skeletonizer runs a geodesic wavefront from a seed vertex: vertices are
//! binned into distance rings, each connected component of a ring collapses to
//! one node at its centroid, and components that touch through a mesh edge are
//! linked. Imported skeletons (any external tool) use the same graph type.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap, HashSet};
use std::path::Path;

use nalgebra::Point3;
use serde::{Deserialize, Serialize};

use crate::mesh::TriMesh;

#[derive(Debug, thiserror::Error)]
pub enum SkeletonError {
    #[error("ring width must be positive, got {0}")]
    NonPositiveRingWidth(f64),
    #[error("seed vertex {seed} out of range for {vertex_count} vertices")]
    SeedOutOfRange { seed: usize, vertex_count: usize },
    #[error("mesh is disconnected: {unreached} of {vertex_count} vertices unreachable from the seed")]
    DisconnectedMesh { unreached: usize, vertex_count: usize },
    #[error("ring width {ring_width} yields only {nodes} skeleton node(s), need at least 2")]
    TooFewNodes { ring_width: f64, nodes: usize },
    #[error("requested {requested} stations but skeleton has {nodes} nodes")]
    TooManyStations { requested: usize, nodes: usize },
    #[error("requested {0} stations, need at least 1")]
    NoStations(usize),
    #[error("skeleton json: {0}")]
    Format(String),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("skeleton graph is disconnected ({reached} of {nodes} nodes reachable from node 0)")]
    GraphDisconnected { reached: usize, nodes: usize },
    #[error("skeleton edge ({a}, {b}) is invalid: {detail}")]
    BadEdge { a: u32, b: u32, detail: String },
}

/// Where the geodesic wavefront starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Seed {
    /// Lowest-z vertex (ties by lowest index).
    #[default]
    #[serde(rename = "auto", with = "auto_seed")]
    Auto,
    Vertex(usize),
}

mod auto_seed {
    pub fn serialize<S: serde::Serializer>(s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str("auto")
    }
    pub fn deserialize<'de, D: serde::Deserializer<'de>>(d: D) -> Result<(), D::Error> {
        let tag = <std::borrow::Cow<'_, str> as serde::Deserialize>::deserialize(d)?;
        if tag == "auto" {
            Ok(())
        } else {
            Err(serde::de::Error::custom("expected \"auto\" or a vertex index"))
        }
    }
}

/// Centerline graph: node points (mm), undirected edges, per-node mean radius
/// of the contributing surface vertices, and geodesic depth from the root.
#[derive(Debug, Clone)]
pub struct SkeletonGraph {
    pub nodes: Vec<Point3<f64>>,
    /// Undirected, deduplicated, each pair sorted, list sorted.
    pub edges: Vec<(u32, u32)>,
    pub node_radius: Vec<f64>,
    /// Graph geodesic distance (mm) from node 0 along skeleton edges. Node 0
    /// is the seed component for extracted skeletons and the first listed node
    /// for imported ones.
    pub depth: Vec<f64>,
    adjacency: Vec<Vec<u32>>,
}

impl SkeletonGraph {
    /// Validate edges, require connectivity, and derive depth from node 0.
    pub fn new(
        nodes: Vec<Point3<f64>>,
        mut edges: Vec<(u32, u32)>,
        node_radius: Vec<f64>,
    ) -> Result<Self, SkeletonError> {
        let n = nodes.len();
        assert_eq!(node_radius.len(), n, "one radius per node");
        for &(a, b) in &edges {
            if a == b {
                return Err(SkeletonError::BadEdge { a, b, detail: "self-loop".into() });
            }
            if a as usize >= n || b as usize >= n {
                return Err(SkeletonError::BadEdge {
                    a,
                    b,
                    detail: format!("node index out of range (graph has {n} nodes)"),
                });
            }
        }
        for e in &mut edges {
            if e.0 > e.1 {
                *e = (e.1, e.0);
            }
        }
        edges.sort_unstable();
        edges.dedup();
        let mut adjacency = vec![Vec::new(); n];
        for &(a, b) in &edges {
            adjacency[a as usize].push(b);
            adjacency[b as usize].push(a);
        }
        let depth = graph_depth(&nodes, &adjacency);
        let reached = depth.iter().filter(|d| d.is_finite()).count();
        if reached != n {
            return Err(SkeletonError::GraphDisconnected { reached, nodes: n });
        }
        Ok(SkeletonGraph { nodes, edges, node_radius, depth, adjacency })
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn neighbors(&self, node: u32) -> &[u32] {
        &self.adjacency[node as usize]
    }

    pub fn save_json(&self, path: &Path) -> Result<(), SkeletonError> {
        let doc = SkeletonJson {
            nodes: self.nodes.iter().map(|p| [p.x, p.y, p.z]).collect(),
            edges: self.edges.iter().map(|&(a, b)| [a, b]).collect(),
            radius: self.node_radius.clone(),
        };
        let text = serde_json::to_string_pretty(&doc).expect("skeleton serializes");
        std::fs::write(path, text)
            .map_err(|source| SkeletonError::Io { path: path.display().to_string(), source })
    }

    pub fn load_json(path: &Path) -> Result<Self, SkeletonError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| SkeletonError::Io { path: path.display().to_string(), source })?;
        let doc: SkeletonJson = serde_json::from_str(&text)
            .map_err(|e| SkeletonError::Format(format!("{}: {e}", path.display())))?;
        if doc.radius.len() != doc.nodes.len() {
            return Err(SkeletonError::Format(format!(
                "{} radii for {} nodes",
                doc.radius.len(),
                doc.nodes.len()
            )));
        }
        SkeletonGraph::new(
            doc.nodes.iter().map(|p| Point3::new(p[0], p[1], p[2])).collect(),
            doc.edges.iter().map(|e| (e[0], e[1])).collect(),
            doc.radius,
        )
    }

    fn weighted_adjacency(&self) -> Vec<Vec<(usize, f64)>> {
        self.adjacency
            .iter()
            .enumerate()
            .map(|(i, nbrs)| {
                nbrs.iter()
                    .map(|&j| (j as usize, (self.nodes[j as usize] - self.nodes[i]).norm()))
                    .collect()
            })
            .collect()
    }

    /// The longest shortest path through the graph by metric (mm) length —
    /// the natural flythrough route for a tubular mesh, as an ordered node
    /// sequence.
    ///
    /// Two-sweep diameter search: the farthest node from node 0, then the
    /// farthest node from that (exact on trees, which ring skeletons of
    /// tubes are). Ties always resolve to the lowest node index and the
    /// result starts at its lower-indexed endpoint, so the route is
    /// deterministic.
    pub fn longest_path(&self) -> Vec<u32> {
        if self.nodes.len() == 1 {
            return vec![0];
        }
        let weighted = self.weighted_adjacency();
        let farthest = |dist: &[f64]| -> usize {
            let mut best = 0usize;
            for (i, &d) in dist.iter().enumerate() {
                if d > dist[best] {
                    best = i;
                }
            }
            best
        };
        let a = farthest(&dijkstra(0, &weighted));
        let dist_a = dijkstra(a, &weighted);
        let b = farthest(&dist_a);

        // walk b back to a along steepest descent of dist_a; at every step
        // some neighbor lies exactly on a shortest path
        let mut path = vec![b as u32];
        let mut cur = b;
        while cur != a {
            let mut next = None;
            for &(n, w) in &weighted[cur] {
                let on_path = (dist_a[n] + w - dist_a[cur]).abs() <= 1e-9 * dist_a[cur].max(1.0);
                if on_path && next.map_or(true, |m| n < m) {
                    next = Some(n);
                }
            }
            cur = next.expect("a shortest-path predecessor exists below the source");
            path.push(cur as u32);
        }
        if path[0] > *path.last().unwrap() {
            path.reverse();
        }
        path
    }
}

#[derive(Serialize, Deserialize)]
struct SkeletonJson {
    nodes: Vec<[f64; 3]>,
    edges: Vec<[u32; 2]>,
    radius: Vec<f64>,
}

/// Min-heap entry ordered by distance (then index, for a stable pop order).
#[derive(PartialEq)]
struct HeapEntry {
    dist: f64,
    node: usize,
}

impl Eq for HeapEntry {}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.dist.total_cmp(&other.dist).then(self.node.cmp(&other.node))
    }
}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

fn dijkstra(start: usize, adjacency: &[Vec<(usize, f64)>]) -> Vec<f64> {
    let mut dist = vec![f64::INFINITY; adjacency.len()];
    dist[start] = 0.0;
    let mut heap = BinaryHeap::new();
    heap.push(Reverse(HeapEntry { dist: 0.0, node: start }));
    while let Some(Reverse(HeapEntry { dist: d, node })) = heap.pop() {
        if d > dist[node] {
            continue;
        }
        for &(next, w) in &adjacency[node] {
            let nd = d + w;
            if nd < dist[next] {
                dist[next] = nd;
                heap.push(Reverse(HeapEntry { dist: nd, node: next }));
            }
        }
    }
    dist
}

fn graph_depth(nodes: &[Point3<f64>], adjacency: &[Vec<u32>]) -> Vec<f64> {
    let weighted: Vec<Vec<(usize, f64)>> = adjacency
        .iter()
        .enumerate()
        .map(|(i, nbrs)| {
            nbrs.iter()
                .map(|&j| (j as usize, (nodes[j as usize] - nodes[i]).norm()))
                .collect()
        })
        .collect();
    dijkstra(0, &weighted)
}

/// Extract a centerline skeleton by geodesic wavefront propagation.
///
/// Vertices are binned by geodesic distance from the seed into rings of
/// `ring_width`; each connected component of a ring becomes one node at its
/// vertex centroid, with radius = mean vertex distance to that centroid.
/// Components of different rings joined by a mesh edge become skeleton edges.
pub fn skeletonize(mesh: &TriMesh, seed: Seed, ring_width: f64) -> Result<SkeletonGraph, SkeletonError> {
    if ring_width <= 0.0 {
        return Err(SkeletonError::NonPositiveRingWidth(ring_width));
    }
    let n = mesh.vertex_count();
    let seed_vertex = match seed {
        Seed::Vertex(v) if v >= n => {
            return Err(SkeletonError::SeedOutOfRange { seed: v, vertex_count: n })
        }
        Seed::Vertex(v) => v,
        Seed::Auto => {
            let mut best = 0usize;
            for (i, p) in mesh.vertices.iter().enumerate() {
                if p.z < mesh.vertices[best].z {
                    best = i;
                }
            }
            best
        }
    };

    // vertex adjacency with Euclidean edge weights
    let mut adjacency: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    {
        let mut seen: HashSet<(u32, u32)> = HashSet::new();
        for f in &mesh.faces {
            for (a, b) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])] {
                let key = if a < b { (a, b) } else { (b, a) };
                if seen.insert(key) {
                    let w = (mesh.vertices[a as usize] - mesh.vertices[b as usize]).norm();
                    adjacency[a as usize].push((b as usize, w));
                    adjacency[b as usize].push((a as usize, w));
                }
            }
        }
    }
    let dist = dijkstra(seed_vertex, &adjacency);
    let unreached = dist.iter().filter(|d| !d.is_finite()).count();
    if unreached > 0 {
        return Err(SkeletonError::DisconnectedMesh { unreached, vertex_count: n });
    }

    // ring id per vertex, then connected components within each ring
    let ring_of: Vec<usize> = dist.iter().map(|d| (d / ring_width).floor() as usize).collect();
    const UNASSIGNED: u32 = u32::MAX;
    let mut comp_of = vec![UNASSIGNED; n];
    // component records: (ring, member vertices); discovery order is by
    // ascending ring then ascending lowest vertex index, except that the seed
    // component is always node 0 so depth is measured from the wavefront root
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_unstable_by_key(|&v| (ring_of[v], v));
    let seed_pos = order.iter().position(|&v| v == seed_vertex).expect("seed in order");
    order.swap(0, seed_pos);
    let mut components: Vec<(usize, Vec<usize>)> = Vec::new();
    for &start in &order {
        if comp_of[start] != UNASSIGNED {
            continue;
        }
        let comp_id = components.len() as u32;
        let ring = ring_of[start];
        let mut members = vec![start];
        comp_of[start] = comp_id;
        let mut stack = vec![start];
        while let Some(v) = stack.pop() {
            for &(u, _) in &adjacency[v] {
                if ring_of[u] == ring && comp_of[u] == UNASSIGNED {
                    comp_of[u] = comp_id;
                    members.push(u);
                    stack.push(u);
                }
            }
        }
        components.push((ring, members));
    }

    // The deepest bin along a branch can be an arbitrarily thin sliver of
    // surface (whatever remains past the last full ring). A sliver's centroid
    // hugs the wall, which makes a useless skeleton node and an unsafe camera
    // station. Fold any terminal component spanning less than a full ring
    // width into its neighbor one ring shallower.
    {
        let comp_count = components.len();
        let mut comp_dmax = vec![f64::NEG_INFINITY; comp_count];
        for (ci, (_, members)) in components.iter().enumerate() {
            for &v in members {
                comp_dmax[ci] = comp_dmax[ci].max(dist[v]);
            }
        }
        let mut has_deeper = vec![false; comp_count];
        let mut shallow_links: Vec<HashMap<u32, usize>> = vec![HashMap::new(); comp_count];
        for (v, nbrs) in adjacency.iter().enumerate() {
            for &(u, _) in nbrs {
                if v >= u {
                    continue;
                }
                let (a, b) = (comp_of[v], comp_of[u]);
                if a == b {
                    continue;
                }
                let (ra, rb) = (components[a as usize].0, components[b as usize].0);
                if rb > ra {
                    has_deeper[a as usize] = true;
                } else if ra > rb {
                    has_deeper[b as usize] = true;
                }
                if rb + 1 == ra {
                    *shallow_links[a as usize].entry(b).or_insert(0) += 1;
                } else if ra + 1 == rb {
                    *shallow_links[b as usize].entry(a).or_insert(0) += 1;
                }
            }
        }
        let mut merge_into: Vec<Option<u32>> = vec![None; comp_count];
        for ci in 0..comp_count {
            let ring = components[ci].0;
            if ring == 0 || has_deeper[ci] {
                continue;
            }
            if comp_dmax[ci] - ring as f64 * ring_width >= ring_width {
                continue;
            }
            // most shared mesh edges wins; ties go to the lower component id
            let target = shallow_links[ci]
                .iter()
                .max_by(|(ca, na), (cb, nb)| na.cmp(nb).then(cb.cmp(ca)))
                .map(|(&c, _)| c);
            merge_into[ci] = target;
        }
        if merge_into.iter().any(|m| m.is_some()) {
            let mut merged: Vec<(usize, Vec<usize>)> = Vec::with_capacity(comp_count);
            let mut new_id = vec![UNASSIGNED; comp_count];
            for (ci, (ring, members)) in components.iter().enumerate() {
                if merge_into[ci].is_none() {
                    new_id[ci] = merged.len() as u32;
                    merged.push((*ring, members.clone()));
                }
            }
            for (ci, (_, members)) in components.iter().enumerate() {
                if let Some(target) = merge_into[ci] {
                    merged[new_id[target as usize] as usize].1.extend_from_slice(members);
                }
            }
            components = merged;
            for (ci, (_, members)) in components.iter().enumerate() {
                for &v in members {
                    comp_of[v] = ci as u32;
                }
            }
        }
    }

    let mut nodes = Vec::with_capacity(components.len());
    let mut node_radius = Vec::with_capacity(components.len());
    for (_, members) in &components {
        let mut c = nalgebra::Vector3::zeros();
        for &v in members {
            c += mesh.vertices[v].coords;
        }
        let centroid = Point3::from(c / members.len() as f64);
        let radius =
            members.iter().map(|&v| (mesh.vertices[v] - centroid).norm()).sum::<f64>()
                / members.len() as f64;
        nodes.push(centroid);
        node_radius.push(radius);
    }

    // mesh edges crossing between components become skeleton edges
    let mut edges: Vec<(u32, u32)> = Vec::new();
    for (v, nbrs) in adjacency.iter().enumerate() {
        for &(u, _) in nbrs {
            let (a, b) = (comp_of[v], comp_of[u]);
            if a < b {
                edges.push((a, b));
            }
        }
    }
    if nodes.len() < 2 {
        return Err(SkeletonError::TooFewNodes { ring_width, nodes: nodes.len() });
    }
    SkeletonGraph::new(nodes, edges, node_radius)
}

/// Greedy farthest-point sampling over node positions. The first station is
/// the node farthest from the node centroid; each next station maximizes its
/// minimum Euclidean distance to those already chosen. Ties break toward the
/// lower node index, so the result is fully deterministic — the `_rng_seed`
/// parameter is part of the stable call signature but never consulted.
pub fn sample_camera_stations(
    skeleton: &SkeletonGraph,
    m: usize,
    _rng_seed: u64,
) -> Result<Vec<u32>, SkeletonError> {
    let n = skeleton.node_count();
    if m == 0 {
        return Err(SkeletonError::NoStations(m));
    }
    if m > n {
        return Err(SkeletonError::TooManyStations { requested: m, nodes: n });
    }
    let centroid = Point3::from(
        skeleton.nodes.iter().map(|p| p.coords).sum::<nalgebra::Vector3<f64>>() / n as f64,
    );
    // strict > keeps the lowest index on ties
    fn argmax(n: usize, score: impl Fn(usize) -> f64) -> usize {
        let mut best = 0usize;
        let mut best_score = f64::NEG_INFINITY;
        for i in 0..n {
            let s = score(i);
            if s > best_score {
                best = i;
                best_score = s;
            }
        }
        best
    }
    let first = argmax(n, |i| (skeleton.nodes[i] - centroid).norm());
    let mut chosen = vec![first as u32];
    let mut min_dist: Vec<f64> =
        (0..n).map(|i| (skeleton.nodes[i] - skeleton.nodes[first]).norm()).collect();
    while chosen.len() < m {
        let next = argmax(n, |i| min_dist[i]);
        chosen.push(next as u32);
        for i in 0..n {
            min_dist[i] = min_dist[i].min((skeleton.nodes[i] - skeleton.nodes[next]).norm());
        }
    }
    Ok(chosen)
}
