//! Triangular meshes of the circular tank cross-section.
//!
//! Meshes are built from concentric rings of nodes. Every ring carries a node
//! on each electrode centre line and on each mid-gap line, and the strip
//! between two rings is triangulated once for a half electrode pitch and then
//! mirrored and rotated. The result has the full dihedral symmetry of the
//! electrode ring, which the forward and sensitivity tests rely on.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;

use crate::error::{from_json_str, Error, Result};

/// Electrode nodes must sit on the circle to within this fraction of the radius.
pub const BOUNDARY_TOLERANCE: f64 = 1e-9;

/// Largest angular step between consecutive boundary nodes (rad). Keeps the
/// inscribed polygon area within 1% of the disk area.
const MAX_BOUNDARY_STEP: f64 = 0.2;

const AREA_TOLERANCE: f64 = 0.01;

/// A boundary electrode: a run of consecutive boundary edges, ordered
/// counter-clockwise.
#[derive(Debug, Clone, PartialEq)]
pub struct Electrode {
    pub index: usize,
    pub boundary_edges: Vec<[usize; 2]>,
    pub arc_length: f64,
}

/// Immutable, validated triangular mesh of a disk with boundary electrodes.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    nodes: Vec<[f64; 2]>,
    elements: Vec<[usize; 3]>,
    electrodes: Vec<Electrode>,
    radius: f64,
}

impl Mesh {
    /// Build a mesh from raw parts, computing electrode arc lengths and
    /// checking every mesh invariant.
    pub fn new(
        radius: f64,
        nodes: Vec<[f64; 2]>,
        elements: Vec<[usize; 3]>,
        electrode_edges: Vec<Vec<[usize; 2]>>,
    ) -> Result<Self> {
        if !(radius.is_finite() && radius > 0.0) {
            return Err(Error::Validation(format!("radius must be positive, got {radius}")));
        }
        for (i, p) in nodes.iter().enumerate() {
            if !(p[0].is_finite() && p[1].is_finite()) {
                return Err(Error::Validation(format!("node {i} has non-finite coordinates")));
            }
        }
        let mut electrodes = Vec::with_capacity(electrode_edges.len());
        for (index, edges) in electrode_edges.into_iter().enumerate() {
            let mut arc_length = 0.0;
            for &[a, b] in &edges {
                if a >= nodes.len() || b >= nodes.len() {
                    return Err(Error::Validation(format!(
                        "electrode {index} references node outside [0, {})",
                        nodes.len()
                    )));
                }
                arc_length += dist(nodes[a], nodes[b]);
            }
            electrodes.push(Electrode {
                index,
                boundary_edges: edges,
                arc_length,
            });
        }
        let mesh = Mesh {
            nodes,
            elements,
            electrodes,
            radius,
        };
        mesh.validate()?;
        Ok(mesh)
    }

    /// Bare mesh without electrodes or validation, for element-level tests.
    #[cfg(test)]
    pub(crate) fn new_unchecked_for_tests(nodes: Vec<[f64; 2]>, elements: Vec<[usize; 3]>) -> Self {
        Mesh {
            nodes,
            elements,
            electrodes: Vec::new(),
            radius: 1.0,
        }
    }

    pub fn nodes(&self) -> &[[f64; 2]] {
        &self.nodes
    }

    pub fn elements(&self) -> &[[usize; 3]] {
        &self.elements
    }

    pub fn electrodes(&self) -> &[Electrode] {
        &self.electrodes
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn n_elements(&self) -> usize {
        self.elements.len()
    }

    pub fn n_electrodes(&self) -> usize {
        self.electrodes.len()
    }

    pub fn vertices(&self, element: usize) -> [[f64; 2]; 3] {
        let [a, b, c] = self.elements[element];
        [self.nodes[a], self.nodes[b], self.nodes[c]]
    }

    /// Signed area, positive for counter-clockwise elements.
    pub fn signed_area(&self, element: usize) -> f64 {
        let [p, q, r] = self.vertices(element);
        0.5 * ((q[0] - p[0]) * (r[1] - p[1]) - (r[0] - p[0]) * (q[1] - p[1]))
    }

    pub fn area(&self, element: usize) -> f64 {
        self.signed_area(element).abs()
    }

    pub fn total_area(&self) -> f64 {
        (0..self.n_elements()).map(|e| self.area(e)).sum()
    }

    pub fn centroid(&self, element: usize) -> [f64; 2] {
        let [p, q, r] = self.vertices(element);
        [(p[0] + q[0] + r[0]) / 3.0, (p[1] + q[1] + r[1]) / 3.0]
    }

    pub fn centroids(&self) -> Vec<[f64; 2]> {
        (0..self.n_elements()).map(|e| self.centroid(e)).collect()
    }

    /// Angular position (rad, in [0, 2π)) of the midpoint of an electrode's arc.
    pub fn electrode_center_angle(&self, electrode: usize) -> f64 {
        let edges = &self.electrodes[electrode].boundary_edges;
        let first = self.nodes[edges[0][0]];
        let last = self.nodes[edges[edges.len() - 1][1]];
        let a0 = first[1].atan2(first[0]);
        let mut a1 = last[1].atan2(last[0]);
        if a1 < a0 {
            a1 += 2.0 * PI;
        }
        (0.5 * (a0 + a1)).rem_euclid(2.0 * PI)
    }

    /// Check every structural invariant. Called by every constructor.
    pub fn validate(&self) -> Result<()> {
        let n = self.nodes.len();
        let mut used = vec![false; n];
        for (e, tri) in self.elements.iter().enumerate() {
            for &v in tri {
                if v >= n {
                    return Err(Error::Validation(format!(
                        "element {e} references node {v}, mesh has {n} nodes"
                    )));
                }
                used[v] = true;
            }
            let area = self.signed_area(e);
            if !(area > 0.0) {
                return Err(Error::Validation(format!(
                    "element {e} has non-positive signed area {area:e}"
                )));
            }
        }
        if let Some(orphan) = used.iter().position(|u| !u) {
            return Err(Error::Validation(format!("node {orphan} belongs to no element")));
        }

        let edge_count = edge_incidence(&self.elements);
        let tol = BOUNDARY_TOLERANCE * self.radius;
        let mut owner: HashMap<usize, usize> = HashMap::new();
        for el in &self.electrodes {
            if el.boundary_edges.is_empty() {
                return Err(Error::Validation(format!("electrode {} has no edges", el.index)));
            }
            for &[a, b] in &el.boundary_edges {
                if edge_count.get(&edge_key(a, b)).map(Vec::len) != Some(1) {
                    return Err(Error::Validation(format!(
                        "electrode {} edge [{a}, {b}] is not a boundary edge of the mesh",
                        el.index
                    )));
                }
                for v in [a, b] {
                    let r = norm(self.nodes[v]);
                    if (r - self.radius).abs() > tol {
                        return Err(Error::Validation(format!(
                            "electrode {} node {v} lies at radius {r}, off the boundary circle {}",
                            el.index, self.radius
                        )));
                    }
                    if let Some(&other) = owner.get(&v) {
                        if other != el.index {
                            return Err(Error::Validation(format!(
                                "electrodes {other} and {} overlap at node {v}",
                                el.index
                            )));
                        }
                    }
                    owner.insert(v, el.index);
                }
            }
        }

        let disk = PI * self.radius * self.radius;
        let total = self.total_area();
        if (total - disk).abs() > AREA_TOLERANCE * disk {
            return Err(Error::Validation(format!(
                "elements cover area {total:e}, disk area is {disk:e}"
            )));
        }
        Ok(())
    }
}

/// Parameters for [`generate_disk_mesh`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiskMeshParams {
    pub radius: f64,
    pub n_electrodes: usize,
    /// Fraction of the circumference covered by electrodes.
    pub electrode_coverage: f64,
    pub target_edge_length: f64,
}

impl Default for DiskMeshParams {
    fn default() -> Self {
        DiskMeshParams {
            radius: 0.0665,
            n_electrodes: 16,
            electrode_coverage: 0.5,
            target_edge_length: 0.008,
        }
    }
}

/// Generate a structured ring mesh of a disk with equiangular electrodes.
///
/// Electrode `l` is centred at angle `2πl/L`. Fails rather than coarsening
/// when the target edge length cannot resolve an electrode arc.
pub fn generate_disk_mesh(params: &DiskMeshParams) -> Result<Mesh> {
    let DiskMeshParams {
        radius,
        n_electrodes,
        electrode_coverage,
        target_edge_length: h,
    } = *params;
    if !(radius.is_finite() && radius > 0.0) {
        return Err(Error::InvalidArgument(format!("radius must be positive, got {radius}")));
    }
    if n_electrodes < 4 {
        return Err(Error::InvalidArgument(format!(
            "at least 4 electrodes required, got {n_electrodes}"
        )));
    }
    if !(electrode_coverage > 0.0 && electrode_coverage < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "electrode coverage must lie in (0, 1), got {electrode_coverage}"
        )));
    }
    if !(h.is_finite() && h > 0.0 && h < radius) {
        return Err(Error::InvalidArgument(format!(
            "target edge length must lie in (0, radius), got {h}"
        )));
    }
    let electrode_arc = 2.0 * PI * radius * electrode_coverage / n_electrodes as f64;
    if h > electrode_arc {
        return Err(Error::InfeasibleRefinement(format!(
            "edge length {h} exceeds the electrode arc length {electrode_arc}"
        )));
    }

    let l = n_electrodes;
    let wedge = PI / l as f64;
    let half_electrode = wedge * electrode_coverage;
    let gap = wedge - half_electrode;

    // Ring spacing R/n with n of the form 2^e or 3·2^e: halving h doubles
    // n exactly, and every angular count below depends on n alone.
    let n_rings = ring_count(radius / h);
    // Angular density is boosted by a factor fixed by the coarsest feasible
    // mesh for this electrode layout, so that the boundary step never exceeds
    // MAX_BOUNDARY_STEP whatever h is.
    let coarsest = ring_count(radius / electrode_arc) as f64;
    let boost = (1.0 / (MAX_BOUNDARY_STEP * coarsest)).max(1.0);

    // Boundary counts are fixed at the coarsest ring count of the same
    // 2^e / 3·2^e chain and scaled up, so finer boundaries subdivide coarser
    // ones and electrode edges stay on nested nodes.
    let base = chain_base(n_rings, radius / electrode_arc);
    let scale = n_rings / base;
    let m_e = segments(half_electrode * base as f64 * boost) * scale;
    let m_g = segments(gap * base as f64 * boost) * scale;
    let mut boundary_local: Vec<f64> = (0..=m_e).map(|t| half_electrode * t as f64 / m_e as f64).collect();
    boundary_local.extend((1..=m_g).map(|t| half_electrode + gap * t as f64 / m_g as f64));
    *boundary_local.last_mut().unwrap() = wedge;

    let mut rings: Vec<Ring> = Vec::with_capacity(n_rings + 1);
    rings.push(Ring {
        radius: 0.0,
        local: vec![0.0],
        offset: 0,
    });
    let mut offset = 1;
    for k in 1..=n_rings {
        let local = if k == n_rings {
            boundary_local.clone()
        } else {
            let q = segments(wedge * k as f64 * boost);
            (0..=q).map(|t| wedge * t as f64 / q as f64).collect()
        };
        let r = if k == n_rings {
            radius
        } else {
            radius * k as f64 / n_rings as f64
        };
        let ring = Ring {
            radius: r,
            local,
            offset,
        };
        offset += ring.len(l);
        rings.push(ring);
    }

    let mut nodes = vec![[0.0, 0.0]];
    for ring in &rings[1..] {
        let q = ring.q();
        for j in 0..ring.len(l) {
            let (w, t) = (j / q, j % q);
            let angle = if w % 2 == 0 {
                w as f64 * wedge + ring.local[t]
            } else {
                (w + 1) as f64 * wedge - ring.local[q - t]
            };
            nodes.push([ring.radius * angle.cos(), ring.radius * angle.sin()]);
        }
    }

    let mut elements = Vec::new();
    for k in 1..=n_rings {
        let inner = &rings[k - 1];
        let outer = &rings[k];
        let strip = wedge_strip(inner, outer, k == 1);
        for w in 0..2 * l {
            for tri in &strip {
                let mut g = tri.map(|(ring, t)| rings[ring_of(ring, k)].global(l, w, t));
                if w % 2 == 1 {
                    g.swap(1, 2);
                }
                elements.push(g);
            }
        }
    }

    let boundary = &rings[n_rings];
    let electrodes = (0..l)
        .map(|e| {
            let mut edges = Vec::with_capacity(2 * m_e);
            let w_left = (2 * e + 2 * l - 1) % (2 * l);
            for t in (0..m_e).rev() {
                edges.push([boundary.global(l, w_left, t + 1), boundary.global(l, w_left, t)]);
            }
            for t in 0..m_e {
                edges.push([boundary.global(l, 2 * e, t), boundary.global(l, 2 * e, t + 1)]);
            }
            edges
        })
        .collect();

    Mesh::new(radius, nodes, elements, electrodes)
}

/// Segments needed for an arc of `length` (scaled) ring spacings.
fn segments(length: f64) -> usize {
    (length.ceil() as usize).max(1)
}

/// Smallest member `≥ x` of the chain `n, n/2, n/4, …`, stopping at odd values.
fn chain_base(n: usize, x: f64) -> usize {
    let mut base = n;
    while base.is_multiple_of(2) && (base / 2) as f64 >= x {
        base /= 2;
    }
    base
}

/// Smallest `n ≥ x` of the form `2^e` or `3·2^e`.
fn ring_count(x: f64) -> usize {
    let mut n = 1usize;
    loop {
        if n as f64 >= x {
            return n;
        }
        if n >= 2 && (3 * n / 2) as f64 >= x {
            return 3 * n / 2;
        }
        n *= 2;
    }
}

/// One ring of nodes; `local` holds the angles inside the canonical half
/// pitch, from 0 to π/L inclusive.
struct Ring {
    radius: f64,
    local: Vec<f64>,
    offset: usize,
}

impl Ring {
    fn q(&self) -> usize {
        self.local.len() - 1
    }

    fn len(&self, l: usize) -> usize {
        2 * l * self.q()
    }

    /// Global node index of local position `t` in half-pitch wedge `w`. Odd
    /// wedges are mirror images of the canonical one.
    fn global(&self, l: usize, w: usize, t: usize) -> usize {
        if self.radius == 0.0 {
            return self.offset;
        }
        let q = self.q();
        let j = if w.is_multiple_of(2) {
            w * q + t
        } else {
            (w + 1) * q - t
        };
        self.offset + j % self.len(l)
    }
}

#[derive(Clone, Copy)]
enum Side {
    Inner,
    Outer,
}

fn ring_of(side: Side, k: usize) -> usize {
    match side {
        Side::Inner => k - 1,
        Side::Outer => k,
    }
}

/// Counter-clockwise triangles filling the canonical wedge between two rings.
fn wedge_strip(inner: &Ring, outer: &Ring, fan: bool) -> Vec<[(Side, usize); 3]> {
    let q = outer.q();
    if fan {
        return (0..q)
            .map(|t| [(Side::Inner, 0), (Side::Outer, t), (Side::Outer, t + 1)])
            .collect();
    }
    let p = inner.q();
    let (mut i, mut j) = (0, 0);
    let mut strip = Vec::with_capacity(p + q);
    while i < p || j < q {
        let advance_outer = i == p || (j < q && outer.local[j + 1] <= inner.local[i + 1]);
        if advance_outer {
            strip.push([(Side::Inner, i), (Side::Outer, j), (Side::Outer, j + 1)]);
            j += 1;
        } else {
            strip.push([(Side::Inner, i), (Side::Outer, j), (Side::Inner, i + 1)]);
            i += 1;
        }
    }
    strip
}

/// Element pairs sharing an edge.
#[derive(Debug, Clone, PartialEq)]
pub struct ElementAdjacency {
    /// Each shared edge once, as `(i, j)` with `i < j`, sorted.
    pub pairs: Vec<(usize, usize)>,
    /// Sorted neighbour lists, one per element.
    pub neighbors: Vec<Vec<usize>>,
}

impl ElementAdjacency {
    pub fn from_elements(elements: &[[usize; 3]]) -> Self {
        let mut pairs: Vec<(usize, usize)> = edge_incidence(elements)
            .into_values()
            .filter(|owners| owners.len() == 2)
            .map(|o| (o[0].min(o[1]), o[0].max(o[1])))
            .collect();
        pairs.sort_unstable();
        let mut neighbors = vec![Vec::new(); elements.len()];
        for &(a, b) in &pairs {
            neighbors[a].push(b);
            neighbors[b].push(a);
        }
        for n in &mut neighbors {
            n.sort_unstable();
        }
        ElementAdjacency { pairs, neighbors }
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.neighbors.get(i).is_some_and(|n| n.binary_search(&j).is_ok())
    }
}

pub fn element_adjacency(mesh: &Mesh) -> ElementAdjacency {
    ElementAdjacency::from_elements(mesh.elements())
}

fn edge_key(a: usize, b: usize) -> (usize, usize) {
    (a.min(b), a.max(b))
}

fn edge_incidence(elements: &[[usize; 3]]) -> HashMap<(usize, usize), Vec<usize>> {
    let mut map: HashMap<(usize, usize), Vec<usize>> = HashMap::with_capacity(elements.len() * 2);
    for (e, &[a, b, c]) in elements.iter().enumerate() {
        for (u, v) in [(a, b), (b, c), (c, a)] {
            map.entry(edge_key(u, v)).or_default().push(e);
        }
    }
    map
}

fn dist(p: [f64; 2], q: [f64; 2]) -> f64 {
    (p[0] - q[0]).hypot(p[1] - q[1])
}

fn norm(p: [f64; 2]) -> f64 {
    p[0].hypot(p[1])
}

// ---------------------------------------------------------------------------
// Mesh file

#[derive(Serialize)]
struct MeshDocOut<'a> {
    radius: Box<RawValue>,
    nodes: Vec<Box<RawValue>>,
    elements: Vec<Box<RawValue>>,
    electrodes: Vec<ElectrodeDocOut<'a>>,
}

#[derive(Serialize)]
struct ElectrodeDocOut<'a> {
    index: usize,
    edges: &'a [[usize; 2]],
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MeshDoc {
    radius: f64,
    nodes: Vec<[f64; 2]>,
    elements: Vec<[usize; 3]>,
    electrodes: Vec<ElectrodeDoc>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ElectrodeDoc {
    index: usize,
    edges: Vec<[usize; 2]>,
}

fn raw(text: String) -> Box<RawValue> {
    RawValue::from_string(text).expect("formatted JSON literal")
}

/// 17 significant digits: exact round trip for every f64.
fn float_literal(x: f64) -> String {
    format!("{x:.16e}")
}

/// Serialize a mesh to its JSON document form.
pub fn mesh_to_string(mesh: &Mesh) -> String {
    let doc = MeshDocOut {
        radius: raw(float_literal(mesh.radius)),
        nodes: mesh
            .nodes
            .iter()
            .map(|p| raw(format!("[{}, {}]", float_literal(p[0]), float_literal(p[1]))))
            .collect(),
        elements: mesh
            .elements
            .iter()
            .map(|e| raw(format!("[{}, {}, {}]", e[0], e[1], e[2])))
            .collect(),
        electrodes: mesh
            .electrodes
            .iter()
            .map(|e| ElectrodeDocOut {
                index: e.index,
                edges: &e.boundary_edges,
            })
            .collect(),
    };
    let mut s = serde_json::to_string_pretty(&doc).expect("mesh document serializes");
    s.push('\n');
    s
}

/// Parse and validate a mesh document.
pub fn mesh_from_str(text: &str) -> Result<Mesh> {
    let doc: MeshDoc = from_json_str(text)?;
    let mut edges = vec![None; doc.electrodes.len()];
    for el in doc.electrodes {
        let slot = edges
            .get_mut(el.index)
            .ok_or_else(|| Error::Validation(format!("electrode index {} out of range", el.index)))?;
        if slot.is_some() {
            return Err(Error::Validation(format!("duplicate electrode index {}", el.index)));
        }
        *slot = Some(el.edges);
    }
    let edges = edges.into_iter().map(|e| e.expect("all indices filled")).collect();
    Mesh::new(doc.radius, doc.nodes, doc.elements, edges)
}

pub fn save_mesh(mesh: &Mesh, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, mesh_to_string(mesh))?;
    Ok(())
}

pub fn load_mesh(path: impl AsRef<Path>) -> Result<Mesh> {
    mesh_from_str(&std::fs::read_to_string(path)?)
}
