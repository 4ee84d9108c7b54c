//! Heterogeneous graph data model, text loader, and synthetic generator.
//!
//! Vertices are identified per-type with dense local ids; a global vertex
//! id is the pair (type, local). Global edge ids are dense 0..E-1 in file
//! order (the generator emits them relation-major) and stable for the run.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub type TypeId = usize;
pub type RelId = usize;

#[derive(Debug, Clone)]
pub struct VertexType {
    pub id: TypeId,
    pub name: String,
    pub count: usize,
    pub feature_dim: usize,
}

#[derive(Debug, Clone)]
pub struct Relation {
    pub id: RelId,
    pub name: String,
    pub src_type: TypeId,
    pub dst_type: TypeId,
}

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid graph: {0:?}")]
    Invalid(Vec<String>),
    #[error("unsatisfiable synthetic spec: {0}")]
    Unsatisfiable(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Per-relation in-edge adjacency: for each destination local id, the
/// (src local id, global edge id) pairs of its incoming edges.
#[derive(Debug, Clone)]
struct InCsr {
    offsets: Vec<u32>,
    entries: Vec<(u32, u32)>,
}

#[derive(Debug, Clone)]
pub struct HeteroGraph {
    pub vertex_types: Vec<VertexType>,
    pub relations: Vec<Relation>,
    /// Indexed by global edge id.
    pub edge_src: Vec<u32>,
    pub edge_dst: Vec<u32>,
    /// Global edge id -> relation id (Algorithm-level EdgeType array).
    pub global_edge_type: Vec<u32>,
    /// Per relation, ascending global edge ids.
    rel_edge_ids: Vec<Vec<u32>>,
    in_csr: Vec<InCsr>,
}

impl HeteroGraph {
    pub fn new(
        vertex_types: Vec<VertexType>,
        relations: Vec<Relation>,
        edge_src: Vec<u32>,
        edge_dst: Vec<u32>,
        global_edge_type: Vec<u32>,
    ) -> Result<Self, GraphError> {
        let violations = check_parts(
            &vertex_types,
            &relations,
            &edge_src,
            &edge_dst,
            &global_edge_type,
        );
        if !violations.is_empty() {
            return Err(GraphError::Invalid(violations));
        }
        let r = relations.len();
        let mut rel_edge_ids: Vec<Vec<u32>> = vec![Vec::new(); r];
        for (eid, &rel) in global_edge_type.iter().enumerate() {
            rel_edge_ids[rel as usize].push(eid as u32);
        }
        let mut in_csr = Vec::with_capacity(r);
        for rel in &relations {
            let dst_count = vertex_types[rel.dst_type].count;
            let mut degs = vec![0u32; dst_count];
            for &eid in &rel_edge_ids[rel.id] {
                degs[edge_dst[eid as usize] as usize] += 1;
            }
            let mut offsets = Vec::with_capacity(dst_count + 1);
            let mut acc = 0u32;
            offsets.push(0);
            for d in &degs {
                acc += d;
                offsets.push(acc);
            }
            let mut cursor: Vec<u32> = offsets[..dst_count].to_vec();
            let mut entries = vec![(0u32, 0u32); rel_edge_ids[rel.id].len()];
            for &eid in &rel_edge_ids[rel.id] {
                let dst = edge_dst[eid as usize] as usize;
                entries[cursor[dst] as usize] = (edge_src[eid as usize], eid);
                cursor[dst] += 1;
            }
            in_csr.push(InCsr { offsets, entries });
        }
        Ok(Self {
            vertex_types,
            relations,
            edge_src,
            edge_dst,
            global_edge_type,
            rel_edge_ids,
            in_csr,
        })
    }

    pub fn num_types(&self) -> usize {
        self.vertex_types.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn num_edges(&self) -> usize {
        self.global_edge_type.len()
    }

    pub fn num_vertices(&self) -> usize {
        self.vertex_types.iter().map(|t| t.count).sum()
    }

    /// (src, dst) pairs of a relation in global edge id order.
    pub fn relation_edges(&self, rel: RelId) -> impl Iterator<Item = (u32, u32, u32)> + '_ {
        self.rel_edge_ids[rel]
            .iter()
            .map(move |&eid| (self.edge_src[eid as usize], self.edge_dst[eid as usize], eid))
    }

    /// In-edges of (relation, dst local id) as (src local id, global edge id).
    pub fn in_edges(&self, rel: RelId, dst: u32) -> &[(u32, u32)] {
        let csr = &self.in_csr[rel];
        let lo = csr.offsets[dst as usize] as usize;
        let hi = csr.offsets[dst as usize + 1] as usize;
        &csr.entries[lo..hi]
    }

    /// Diagnostics for every violated invariant; empty iff the graph is valid.
    pub fn validate(&self) -> Vec<String> {
        check_parts(
            &self.vertex_types,
            &self.relations,
            &self.edge_src,
            &self.edge_dst,
            &self.global_edge_type,
        )
    }

    pub fn save(&self, path: &Path) -> Result<(), GraphError> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str("HGRAPH v1\n");
        for t in &self.vertex_types {
            let _ = writeln!(out, "VTYPE {} {} {}", t.name, t.count, t.feature_dim);
        }
        for r in &self.relations {
            let _ = writeln!(
                out,
                "REL {} {} {}",
                r.name, self.vertex_types[r.src_type].name, self.vertex_types[r.dst_type].name
            );
        }
        for eid in 0..self.num_edges() {
            let _ = writeln!(
                out,
                "E {} {} {}",
                self.global_edge_type[eid], self.edge_src[eid], self.edge_dst[eid]
            );
        }
        out
    }
}

fn check_parts(
    vertex_types: &[VertexType],
    relations: &[Relation],
    edge_src: &[u32],
    edge_dst: &[u32],
    global_edge_type: &[u32],
) -> Vec<String> {
    let mut out = Vec::new();
    let t = vertex_types.len();
    let mut names = HashMap::new();
    for (i, vt) in vertex_types.iter().enumerate() {
        if vt.id != i {
            out.push(format!("vertex type id {} not dense at position {}", vt.id, i));
        }
        if vt.count == 0 {
            out.push(format!("vertex type {} has count 0", vt.name));
        }
        if vt.feature_dim == 0 {
            out.push(format!("vertex type {} has feature_dim 0", vt.name));
        }
        if names.insert(vt.name.clone(), i).is_some() {
            out.push(format!("duplicate vertex type name {}", vt.name));
        }
    }
    let mut rel_names = HashMap::new();
    for (i, r) in relations.iter().enumerate() {
        if r.id != i {
            out.push(format!("relation id {} not dense at position {}", r.id, i));
        }
        if r.src_type >= t {
            out.push(format!("relation {} src type out of range", r.name));
        }
        if r.dst_type >= t {
            out.push(format!("relation {} dst type out of range", r.name));
        }
        if rel_names.insert(r.name.clone(), i).is_some() {
            out.push(format!("duplicate relation name {}", r.name));
        }
    }
    if edge_src.len() != global_edge_type.len() || edge_dst.len() != global_edge_type.len() {
        out.push("edge count mismatch between src/dst/type arrays".to_string());
        return out;
    }
    for (eid, &rel) in global_edge_type.iter().enumerate() {
        let rel = rel as usize;
        if rel >= relations.len() {
            out.push(format!("edge {eid}: relation id {rel} out of range"));
            continue;
        }
        let r = &relations[rel];
        if r.src_type < t && edge_src[eid] as usize >= vertex_types[r.src_type].count {
            out.push(format!("edge {eid}: src vertex id out of range"));
        }
        if r.dst_type < t && edge_dst[eid] as usize >= vertex_types[r.dst_type].count {
            out.push(format!("edge {eid}: dst vertex id out of range"));
        }
    }
    out
}

/// Parses the `HGRAPH v1` line-oriented edge-list format.
pub fn load_graph(path: &Path) -> Result<HeteroGraph, GraphError> {
    let text = std::fs::read_to_string(path)?;
    parse_graph(&text)
}

pub fn parse_graph(text: &str) -> Result<HeteroGraph, GraphError> {
    let err = |line: usize, msg: String| GraphError::Parse { line, msg };
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
    match lines.next() {
        Some((_, "HGRAPH v1")) => {}
        Some((n, l)) => return Err(err(n, format!("expected 'HGRAPH v1', got '{l}'"))),
        None => return Err(err(1, "empty file".to_string())),
    }
    let mut vertex_types: Vec<VertexType> = Vec::new();
    let mut relations: Vec<Relation> = Vec::new();
    let mut type_by_name: HashMap<String, TypeId> = HashMap::new();
    let mut edge_src = Vec::new();
    let mut edge_dst = Vec::new();
    let mut edge_rel = Vec::new();
    for (n, line) in lines {
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("VTYPE") => {
                let name = parts
                    .next()
                    .ok_or_else(|| err(n, "VTYPE missing name".into()))?;
                let count: usize = parse_field(parts.next(), n, "VTYPE count")?;
                let feature_dim: usize = parse_field(parts.next(), n, "VTYPE feature_dim")?;
                let id = vertex_types.len();
                type_by_name.insert(name.to_string(), id);
                vertex_types.push(VertexType {
                    id,
                    name: name.to_string(),
                    count,
                    feature_dim,
                });
            }
            Some("REL") => {
                let name = parts
                    .next()
                    .ok_or_else(|| err(n, "REL missing name".into()))?;
                let src = parts
                    .next()
                    .ok_or_else(|| err(n, "REL missing src type".into()))?;
                let dst = parts
                    .next()
                    .ok_or_else(|| err(n, "REL missing dst type".into()))?;
                let src_type = *type_by_name
                    .get(src)
                    .ok_or_else(|| err(n, format!("unknown src vertex type '{src}'")))?;
                let dst_type = *type_by_name
                    .get(dst)
                    .ok_or_else(|| err(n, format!("unknown dst vertex type '{dst}'")))?;
                relations.push(Relation {
                    id: relations.len(),
                    name: name.to_string(),
                    src_type,
                    dst_type,
                });
            }
            Some("E") => {
                let rel: usize = parse_field(parts.next(), n, "E relation id")?;
                let src: u32 = parse_field(parts.next(), n, "E src id")?;
                let dst: u32 = parse_field(parts.next(), n, "E dst id")?;
                let r = relations
                    .get(rel)
                    .ok_or_else(|| err(n, format!("relation id {rel} out of range")))?;
                if src as usize >= vertex_types[r.src_type].count
                    || dst as usize >= vertex_types[r.dst_type].count
                {
                    return Err(err(n, "vertex id out of range".to_string()));
                }
                edge_rel.push(rel as u32);
                edge_src.push(src);
                edge_dst.push(dst);
            }
            Some(other) => return Err(err(n, format!("unknown record '{other}'"))),
            None => unreachable!(),
        }
    }
    HeteroGraph::new(vertex_types, relations, edge_src, edge_dst, edge_rel)
}

fn parse_field<T: std::str::FromStr>(
    field: Option<&str>,
    line: usize,
    what: &str,
) -> Result<T, GraphError> {
    let s = field.ok_or_else(|| GraphError::Parse {
        line,
        msg: format!("{what} missing"),
    })?;
    s.parse().map_err(|_| GraphError::Parse {
        line,
        msg: format!("{what}: cannot parse '{s}'"),
    })
}

#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    /// Per-type vertex counts; length defines T.
    pub counts: Vec<usize>,
    pub relations: usize,
    pub edges: usize,
    pub feature_dim: usize,
    /// 0 = uniform endpoints; larger values skew toward low vertex ids.
    pub skew: f64,
    pub seed: u64,
}

/// Deterministic synthetic graph with Table-1-like shape: relation
/// src/dst types round-robin over type pairs, edges split evenly over
/// relations, endpoints drawn from a power-law-skewed distribution.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<HeteroGraph, GraphError> {
    let t = spec.counts.len();
    if t == 0 || spec.relations == 0 {
        return Err(GraphError::Unsatisfiable("need at least one type and relation".into()));
    }
    if spec.counts.iter().any(|&c| c == 0) {
        return Err(GraphError::Unsatisfiable("zero-count vertex type".into()));
    }
    if spec.edges == 0 {
        return Err(GraphError::Unsatisfiable("need at least one edge".into()));
    }
    let vertex_types: Vec<VertexType> = spec
        .counts
        .iter()
        .enumerate()
        .map(|(i, &count)| VertexType {
            id: i,
            name: format!("t{i}"),
            count,
            feature_dim: spec.feature_dim,
        })
        .collect();
    let relations: Vec<Relation> = (0..spec.relations)
        .map(|i| {
            let pair = i % (t * t);
            Relation {
                id: i,
                name: format!("r{i}"),
                src_type: pair % t,
                dst_type: pair / t,
            }
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let exponent = 1.0 + spec.skew.max(0.0);
    let skewed = |count: usize, rng: &mut ChaCha8Rng| -> u32 {
        let u: f64 = rng.gen();
        ((u.powf(exponent) * count as f64) as usize).min(count - 1) as u32
    };
    let base = spec.edges / spec.relations;
    let extra = spec.edges % spec.relations;
    let mut edge_src = Vec::with_capacity(spec.edges);
    let mut edge_dst = Vec::with_capacity(spec.edges);
    let mut edge_rel = Vec::with_capacity(spec.edges);
    for r in &relations {
        let n = base + usize::from(r.id < extra);
        let sc = vertex_types[r.src_type].count;
        let dc = vertex_types[r.dst_type].count;
        for _ in 0..n {
            edge_src.push(skewed(sc, &mut rng));
            edge_dst.push(skewed(dc, &mut rng));
            edge_rel.push(r.id as u32);
        }
    }
    HeteroGraph::new(vertex_types, relations, edge_src, edge_dst, edge_rel)
}
