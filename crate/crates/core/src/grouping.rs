//! Grouping critical atoms into equivalence buckets and measuring how
//! consistently a model is right or wrong within each bucket.

use std::collections::{BTreeMap, BTreeSet};

use futures::stream::{self, StreamExt, TryStreamExt};
use serde::{Deserialize, Serialize};

use crate::backends::Backend;
use crate::defeasible::CriticalAtomSet;
use crate::error::{Error, Result};
use crate::model::NliLabel;

pub const DEFAULT_THRESHOLD: f64 = 0.75;

pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() || u.is_empty() {
        return Err(Error::Precondition(format!("vectors of dimension {} and {}", u.len(), v.len())));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 || !nu.is_finite() || !nv.is_finite() {
        return Err(Error::Precondition("cosine of a zero or non-finite vector".into()));
    }
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityGraph {
    pub nodes: Vec<String>,
    /// Unordered pairs stored with the smaller id first.
    pub edges: BTreeSet<(String, String)>,
    pub threshold: f64,
}

impl SimilarityGraph {
    pub fn new(nodes: impl IntoIterator<Item = String>, threshold: f64) -> Self {
        let nodes: BTreeSet<String> = nodes.into_iter().collect();
        SimilarityGraph { nodes: nodes.into_iter().collect(), edges: BTreeSet::new(), threshold }
    }

    /// Adds an undirected edge. Self-loops and unknown nodes are rejected.
    pub fn add_edge(&mut self, u: &str, v: &str) -> Result<()> {
        if u == v {
            return Err(Error::Precondition(format!("self-loop on {u}")));
        }
        for x in [u, v] {
            if self.nodes.binary_search_by(|n| n.as_str().cmp(x)).is_err() {
                return Err(Error::Precondition(format!("unknown node {x}")));
            }
        }
        let (a, b) = if u < v { (u, v) } else { (v, u) };
        self.edges.insert((a.to_string(), b.to_string()));
        Ok(())
    }

    pub fn has_edge(&self, u: &str, v: &str) -> bool {
        let (a, b) = if u < v { (u, v) } else { (v, u) };
        self.edges.contains(&(a.to_string(), b.to_string()))
    }

    fn adjacency(&self) -> Vec<BTreeSet<usize>> {
        let index: BTreeMap<&str, usize> = self.nodes.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
        let mut adj = vec![BTreeSet::new(); self.nodes.len()];
        for (u, v) in &self.edges {
            let (i, j) = (index[u.as_str()], index[v.as_str()]);
            adj[i].insert(j);
            adj[j].insert(i);
        }
        adj
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphStats {
    pub pairs: usize,
    pub pairs_above_threshold: usize,
    pub entailment_calls: usize,
}

/// Edge iff similarity clears `threshold` and the classifier finds entailment
/// in both directions. Only pairs above the threshold reach the classifier,
/// and the reverse direction is only asked when the forward one holds.
pub async fn build_graph(
    atoms: &[(String, String)],
    embeddings: &BTreeMap<String, Vec<f64>>,
    threshold: f64,
    nli: &Backend,
    parallelism: usize,
) -> Result<(SimilarityGraph, GraphStats)> {
    let texts: BTreeMap<&str, &str> = atoms.iter().map(|(id, t)| (id.as_str(), t.as_str())).collect();
    if let Some(id) = texts.keys().find(|id| !embeddings.contains_key(**id)) {
        return Err(Error::Precondition(format!("no embedding for atom {id}")));
    }
    let ids: Vec<&str> = texts.keys().copied().collect();
    let mut stats = GraphStats::default();
    let mut candidates = Vec::new();
    for (i, u) in ids.iter().enumerate() {
        for v in &ids[i + 1..] {
            stats.pairs += 1;
            if cosine(&embeddings[*u], &embeddings[*v])? >= threshold {
                candidates.push((*u, *v));
            }
        }
    }
    stats.pairs_above_threshold = candidates.len();
    let texts = &texts;
    let checks: Vec<(bool, usize)> = stream::iter(&candidates)
        .map(|(u, v)| async move {
            let context = |e: Error| e.context(format!("entailment between {u} and {v}"));
            let forward = nli.classify_entailment(texts[u], texts[v]).await.map_err(context)?;
            if forward != NliLabel::Entailment {
                return Ok::<_, Error>((false, 1));
            }
            let backward = nli.classify_entailment(texts[v], texts[u]).await.map_err(context)?;
            Ok((backward == NliLabel::Entailment, 2))
        })
        .buffered(parallelism.max(1))
        .try_collect()
        .await?;
    let mut graph = SimilarityGraph::new(ids.iter().map(|s| s.to_string()), threshold);
    for ((u, v), (edge, calls)) in candidates.iter().zip(checks) {
        stats.entailment_calls += calls;
        if edge {
            graph.add_edge(u, v)?;
        }
    }
    Ok((graph, stats))
}

/// Maximal cliques over node indices, Bron–Kerbosch with Tomita pivoting.
/// Each clique is sorted; the list is sorted lexicographically.
pub fn maximal_cliques_indexed(adj: &[BTreeSet<usize>]) -> Vec<Vec<usize>> {
    fn expand(
        adj: &[BTreeSet<usize>],
        r: &mut Vec<usize>,
        mut p: BTreeSet<usize>,
        mut x: BTreeSet<usize>,
        out: &mut Vec<Vec<usize>>,
    ) {
        if p.is_empty() {
            if x.is_empty() && !r.is_empty() {
                let mut clique = r.clone();
                clique.sort_unstable();
                out.push(clique);
            }
            return;
        }
        let pivot = *p
            .union(&x)
            .max_by_key(|u| (p.intersection(&adj[**u]).count(), std::cmp::Reverse(**u)))
            .expect("p is non-empty");
        let candidates: Vec<usize> = p.difference(&adj[pivot]).copied().collect();
        for v in candidates {
            r.push(v);
            let np = p.intersection(&adj[v]).copied().collect();
            let nx = x.intersection(&adj[v]).copied().collect();
            expand(adj, r, np, nx, out);
            r.pop();
            p.remove(&v);
            x.insert(v);
        }
    }
    let mut out = Vec::new();
    expand(adj, &mut Vec::new(), (0..adj.len()).collect(), BTreeSet::new(), &mut out);
    out.sort();
    out
}

/// Maximal cliques by member id, each sorted, listed lexicographically.
/// Isolated nodes come back as singleton cliques.
pub fn maximal_cliques(graph: &SimilarityGraph) -> Vec<Vec<String>> {
    let mut cliques: Vec<Vec<String>> = maximal_cliques_indexed(&graph.adjacency())
        .into_iter()
        .map(|c| c.into_iter().map(|i| graph.nodes[i].clone()).collect())
        .collect();
    cliques.sort();
    cliques
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticalAtomBucket {
    pub bucket_id: String,
    pub member_atom_ids: Vec<String>,
    /// Critical atoms whose assignment landed in this bucket.
    pub assigned_atom_ids: Vec<String>,
    pub member_examples: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Buckets {
    pub buckets: Vec<CriticalAtomBucket>,
    /// Critical atoms contained in more than one maximal clique.
    pub overlapping_atoms: usize,
}

/// Assigns each critical atom to its largest containing clique (earliest in
/// clique order on ties) and spreads each example's unit weight evenly over
/// its critical atoms. Bucket ids follow clique order.
pub fn build_buckets(cliques: &[Vec<String>], critical_sets: &[CriticalAtomSet]) -> Result<Buckets> {
    let mut containing: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, clique) in cliques.iter().enumerate() {
        for atom in clique {
            containing.entry(atom.as_str()).or_default().push(i);
        }
    }
    let mut assignment: BTreeMap<&str, usize> = BTreeMap::new();
    let mut overlapping = 0;
    let mut orphans = Vec::new();
    for atom in critical_sets.iter().flat_map(|s| &s.atom_ids) {
        if assignment.contains_key(atom.as_str()) {
            continue;
        }
        match containing.get(atom.as_str()) {
            None => orphans.push(atom.as_str()),
            Some(list) => {
                overlapping += usize::from(list.len() > 1);
                let best = list
                    .iter()
                    .copied()
                    .max_by_key(|i| (cliques[*i].len(), std::cmp::Reverse(*i)))
                    .expect("non-empty");
                assignment.insert(atom, best);
            }
        }
    }
    if !orphans.is_empty() {
        return Err(Error::Integrity(format!("critical atoms missing from every clique: {}", orphans.join(", "))));
    }

    let mut weights: BTreeMap<usize, BTreeMap<&str, f64>> = BTreeMap::new();
    let mut assigned: BTreeMap<usize, BTreeSet<&str>> = BTreeMap::new();
    for set in critical_sets.iter().filter(|s| !s.is_empty()) {
        let share = 1.0 / set.atom_ids.len() as f64;
        for atom in &set.atom_ids {
            let bucket = assignment[atom.as_str()];
            *weights.entry(bucket).or_default().entry(set.example_id.as_str()).or_default() += share;
            assigned.entry(bucket).or_default().insert(atom);
        }
    }
    let width = cliques.len().to_string().len().max(4);
    let buckets = weights
        .into_iter()
        .map(|(i, members)| CriticalAtomBucket {
            bucket_id: format!("k{i:0width$}"),
            member_atom_ids: cliques[i].clone(),
            assigned_atom_ids: assigned[&i].iter().map(|s| s.to_string()).collect(),
            member_examples: members.into_iter().map(|(e, w)| (e.to_string(), w)).collect(),
        })
        .collect();
    Ok(Buckets { buckets, overlapping_atoms: overlapping })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketAccuracy {
    pub bucket_id: String,
    pub theta: f64,
    pub weight_total: f64,
}

/// Weighted accuracy of each bucket's member examples.
pub fn bucket_accuracies(buckets: &[CriticalAtomBucket], correct: &BTreeMap<String, bool>) -> Result<Vec<BucketAccuracy>> {
    buckets
        .iter()
        .map(|b| {
            let mut hit = 0.0;
            let mut total = 0.0;
            for (example, w) in &b.member_examples {
                let ok = correct
                    .get(example)
                    .ok_or_else(|| Error::Integrity(format!("no prediction for {example} in {}", b.bucket_id)))?;
                total += w;
                if *ok {
                    hit += w;
                }
            }
            if total <= 0.0 {
                return Err(Error::Integrity(format!("bucket {} has no weight", b.bucket_id)));
            }
            Ok(BucketAccuracy { bucket_id: b.bucket_id.clone(), theta: hit / total, weight_total: total })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BucketWeighting {
    #[default]
    Uniform,
    ByWeight,
}

/// Mean over buckets of θ² + (1 − θ)².
pub fn inferential_consistency(accuracies: &[BucketAccuracy], weighting: BucketWeighting) -> Result<f64> {
    if accuracies.is_empty() {
        return Err(Error::Precondition("inferential consistency needs at least one bucket".into()));
    }
    if let Some(bad) = accuracies.iter().find(|a| !(0.0..=1.0).contains(&a.theta)) {
        return Err(Error::Precondition(format!("bucket {} has theta {} outside [0, 1]", bad.bucket_id, bad.theta)));
    }
    let agree = |t: f64| t * t + (1.0 - t) * (1.0 - t);
    Ok(match weighting {
        BucketWeighting::Uniform => {
            accuracies.iter().map(|a| agree(a.theta)).sum::<f64>() / accuracies.len() as f64
        }
        BucketWeighting::ByWeight => {
            let total: f64 = accuracies.iter().map(|a| a.weight_total).sum();
            accuracies.iter().map(|a| a.weight_total * agree(a.theta)).sum::<f64>() / total
        }
    })
}
