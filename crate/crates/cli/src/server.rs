//! JSON-over-HTTP annotation service: hands out atoms that survived machine
//! pruning and stores the judgments in the run's annotation file.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::net::SocketAddr;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use atomic_nli::model::{Atom, EffectScore};
use atomic_nli::prompts::ANNOTATION_INSTRUCTIONS;
use atomic_nli::validator::{latest_records, AnnotationRecord};
use atomic_nli::{Error, Result};
use axum::body::Bytes;
use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{Html, IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::dataset::{Dataset, TaskKind};
use crate::run::{timestamp, RunDir, ANNOTATIONS};
use crate::stages::{is_repeat, ATOMS_PRUNED};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueueItem {
    pub atom_id: String,
    pub example_id: String,
    pub atom_text: String,
    pub premise: String,
    pub hypothesis: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub update: Option<String>,
    /// Valid judgments must carry an effect score.
    pub effect_required: bool,
}

#[derive(Debug, Default)]
struct Ledger {
    records: Vec<AnnotationRecord>,
    labeled_by: HashMap<String, BTreeSet<String>>,
    /// Active leases per atom: (annotator, expiry).
    leases: HashMap<String, Vec<(String, Instant)>>,
}

impl Ledger {
    fn push(&mut self, record: AnnotationRecord) {
        self.labeled_by.entry(record.atom_id.clone()).or_default().insert(record.annotator_id.clone());
        self.records.push(record);
    }

    fn labeled(&self, atom: &str) -> usize {
        self.labeled_by.get(atom).map_or(0, BTreeSet::len)
    }

    fn has_labeled(&self, atom: &str, annotator: &str) -> bool {
        self.labeled_by.get(atom).is_some_and(|s| s.contains(annotator))
    }

    fn release(&mut self, atom: &str, annotator: &str) {
        if let Some(list) = self.leases.get_mut(atom) {
            list.retain(|(who, _)| who != annotator);
        }
    }
}

pub struct AppState {
    run: RunDir,
    task: TaskKind,
    items: Vec<QueueItem>,
    /// Every stored atom id, mapped to whether it survived pruning.
    atoms: HashMap<String, bool>,
    per_item: usize,
    lease: Duration,
    ledger: Mutex<Ledger>,
}

impl AppState {
    /// Builds the queue from the pruned atoms of `run`. With `dual` each atom
    /// goes to two annotators.
    pub fn load(run: RunDir, dataset: &Dataset, dual: bool, lease: Duration) -> Result<Self> {
        run.require(crate::run::Stage::Prune)?;
        let atoms: Vec<Atom> = run.read_jsonl(ATOMS_PRUNED)?;
        let context: BTreeMap<&str, (&str, &str, Option<&str>)> = match dataset {
            Dataset::Nli(v) => v.iter().map(|e| (e.id.as_str(), (e.premise.as_str(), e.hypothesis.as_str(), None))).collect(),
            Dataset::Defeasible(v) => v
                .iter()
                .map(|e| (e.id.as_str(), (e.premise.as_str(), e.hypothesis.as_str(), Some(e.update.as_str()))))
                .collect(),
        };
        let task = dataset.kind();
        let mut items = Vec::new();
        for atom in atoms.iter().filter(|a| a.machine_valid == Some(true)) {
            let (premise, hypothesis, update) = context
                .get(atom.parent_example_id.as_str())
                .ok_or_else(|| Error::Integrity(format!("atom {} has no parent example", atom.atom_id)))?;
            items.push(QueueItem {
                atom_id: atom.atom_id.clone(),
                example_id: atom.parent_example_id.clone(),
                atom_text: atom.text.clone(),
                premise: premise.to_string(),
                hypothesis: hypothesis.to_string(),
                update: update.map(str::to_string),
                effect_required: task == TaskKind::Defeasible,
            });
        }
        let mut ledger = Ledger::default();
        if run.path(ANNOTATIONS).is_file() {
            for r in run.read_jsonl::<AnnotationRecord>(ANNOTATIONS)? {
                ledger.push(r);
            }
        }
        Ok(AppState {
            atoms: atoms.iter().map(|a| (a.atom_id.clone(), a.machine_valid == Some(true))).collect(),
            run,
            task,
            items,
            per_item: if dual { 2 } else { 1 },
            lease,
            ledger: Mutex::new(ledger),
        })
    }

    fn remaining(&self, ledger: &Ledger) -> usize {
        self.items.iter().filter(|i| ledger.labeled(&i.atom_id) < self.per_item).count()
    }

    /// Next atom for `annotator`. An item stays leased to whoever received it
    /// until it is labeled or the lease runs out.
    fn next_for(&self, ledger: &mut Ledger, annotator: &str, now: Instant) -> Option<usize> {
        for list in ledger.leases.values_mut() {
            list.retain(|(_, until)| *until > now);
        }
        let held = self.items.iter().position(|item| {
            !ledger.has_labeled(&item.atom_id, annotator)
                && ledger.leases.get(&item.atom_id).is_some_and(|l| l.iter().any(|(who, _)| who == annotator))
        });
        if let Some(i) = held {
            return Some(i);
        }
        let pick = self.items.iter().position(|item| {
            let leased_by_others =
                ledger.leases.get(&item.atom_id).map_or(0, |l| l.iter().filter(|(who, _)| who != annotator).count());
            !ledger.has_labeled(&item.atom_id, annotator) && ledger.labeled(&item.atom_id) + leased_by_others < self.per_item
        })?;
        ledger.leases.entry(self.items[pick].atom_id.clone()).or_default().push((annotator.to_string(), now + self.lease));
        Some(pick)
    }
}

#[derive(Debug, Serialize)]
struct FieldProblem {
    field: String,
    message: String,
}

fn problem(field: &str, message: &str) -> FieldProblem {
    FieldProblem { field: field.into(), message: message.into() }
}

fn bad_request(problems: Vec<FieldProblem>) -> Response {
    (StatusCode::BAD_REQUEST, Json(json!({ "error": "invalid annotation record", "fields": problems }))).into_response()
}

fn internal(e: Error) -> Response {
    log::error!("{e}");
    (StatusCode::INTERNAL_SERVER_ERROR, Json(json!({ "error": e.to_string() }))).into_response()
}

/// Reads a record field by field so every problem is reported at once.
fn parse_record(body: &[u8]) -> std::result::Result<AnnotationRecord, Vec<FieldProblem>> {
    let value: Value =
        serde_json::from_slice(body).map_err(|e| vec![problem("body", &format!("invalid JSON: {e}"))])?;
    let Some(obj) = value.as_object() else { return Err(vec![problem("body", "expected a JSON object")]) };
    let mut problems = Vec::new();
    let mut text = |field: &str| match obj.get(field) {
        Some(Value::String(s)) if !s.trim().is_empty() => Some(s.clone()),
        Some(Value::String(_)) => {
            problems.push(problem(field, "must be non-empty"));
            None
        }
        None => {
            problems.push(problem(field, "is required"));
            None
        }
        Some(_) => {
            problems.push(problem(field, "must be a string"));
            None
        }
    };
    let atom_id = text("atom_id");
    let annotator_id = text("annotator_id");
    let valid = match obj.get("valid") {
        Some(Value::Bool(b)) => Some(*b),
        None => {
            problems.push(problem("valid", "is required"));
            None
        }
        Some(_) => {
            problems.push(problem("valid", "must be true or false"));
            None
        }
    };
    let effect = match obj.get("effect") {
        None | Some(Value::Null) => None,
        Some(v) => match v.as_i64().and_then(|n| i8::try_from(n).ok()).map(EffectScore::new) {
            Some(Ok(score)) => Some(score),
            _ => {
                problems.push(problem("effect", "must be an integer from -2 to 2"));
                None
            }
        },
    };
    let timestamp = match obj.get("timestamp") {
        None | Some(Value::Null) => timestamp(),
        Some(Value::String(s)) => s.clone(),
        Some(_) => {
            problems.push(problem("timestamp", "must be a string"));
            String::new()
        }
    };
    match (atom_id, annotator_id, valid) {
        (Some(atom_id), Some(annotator_id), Some(valid)) if problems.is_empty() => {
            Ok(AnnotationRecord { atom_id, annotator_id, valid, effect, timestamp })
        }
        _ => Err(problems),
    }
}

#[derive(Debug, Deserialize)]
struct NextQuery {
    annotator: Option<String>,
}

fn scale() -> Value {
    json!([
        { "value": -2, "label": "strongly weakens" },
        { "value": -1, "label": "weakens" },
        { "value": 0, "label": "no effect" },
        { "value": 1, "label": "strengthens" },
        { "value": 2, "label": "strongly strengthens" },
    ])
}

async fn next_item(State(state): State<Arc<AppState>>, Query(q): Query<NextQuery>) -> Response {
    let Some(annotator) = q.annotator.filter(|a| !a.trim().is_empty()) else {
        return bad_request(vec![problem("annotator", "query parameter is required")]);
    };
    let mut ledger = state.ledger.lock().expect("ledger lock");
    let item = state.next_for(&mut ledger, &annotator, Instant::now()).map(|i| &state.items[i]);
    Json(json!({
        "run_id": state.run.run_id(),
        "item": item,
        "remaining": state.remaining(&ledger),
        "instructions": ANNOTATION_INSTRUCTIONS,
        "scale": scale(),
    }))
    .into_response()
}

async fn post_label(State(state): State<Arc<AppState>>, body: Bytes) -> Response {
    let record = match parse_record(&body) {
        Ok(r) => r,
        Err(problems) => return bad_request(problems),
    };
    match state.atoms.get(&record.atom_id) {
        Some(true) => {}
        Some(false) => {
            let msg = format!("atom {} was removed by machine pruning", record.atom_id);
            return (StatusCode::NOT_FOUND, Json(json!({ "error": msg }))).into_response();
        }
        None => {
            let msg = format!("unknown atom {}", record.atom_id);
            return (StatusCode::NOT_FOUND, Json(json!({ "error": msg }))).into_response();
        }
    }
    if let Err(problems) = record.check(state.task == TaskKind::Defeasible) {
        return bad_request(problems.iter().map(|(f, m)| problem(f, m)).collect());
    }
    let mut ledger = state.ledger.lock().expect("ledger lock");
    ledger.release(&record.atom_id, &record.annotator_id);
    if is_repeat(&ledger.records, &record) {
        let stored = ledger
            .records
            .iter()
            .rev()
            .find(|r| r.atom_id == record.atom_id && r.annotator_id == record.annotator_id)
            .cloned();
        return (StatusCode::OK, Json(json!({ "stored": false, "record": stored }))).into_response();
    }
    if let Err(e) = state.run.append_jsonl(ANNOTATIONS, &record) {
        return internal(e);
    }
    ledger.push(record.clone());
    (StatusCode::CREATED, Json(json!({ "stored": true, "record": record }))).into_response()
}

async fn progress(State(state): State<Arc<AppState>>) -> Response {
    let ledger = state.ledger.lock().expect("ledger lock");
    let latest = latest_records(&ledger.records);
    let mut by_annotator: BTreeMap<&str, usize> = BTreeMap::new();
    for r in &latest {
        *by_annotator.entry(r.annotator_id.as_str()).or_default() += 1;
    }
    let labeled = state.items.iter().filter(|i| ledger.labeled(&i.atom_id) > 0).count();
    Json(json!({
        "run_id": state.run.run_id(),
        "total": state.items.len(),
        "labeled": labeled,
        "complete": state.items.len() - state.remaining(&ledger),
        "remaining": state.remaining(&ledger),
        "per_item": state.per_item,
        "records": latest.len(),
        "by_annotator": by_annotator,
    }))
    .into_response()
}

async fn export_labels(State(state): State<Arc<AppState>>) -> Response {
    let ledger = state.ledger.lock().expect("ledger lock");
    Json(latest_records(&ledger.records)).into_response()
}

const PLACEHOLDER: &str = "<!doctype html>\n<title>Annotation service</title>\n\
<p>The annotation UI is not bundled with this server. Start it with <code>--ui-dir</code> \
pointing at the built assets, or use the JSON API directly:</p>\n<ul>\n\
<li><code>GET /api/queue/next?annotator=ID</code></li>\n<li><code>POST /api/labels</code></li>\n\
<li><code>GET /api/progress</code></li>\n<li><code>GET /api/labels</code></li>\n</ul>\n";

pub fn router(state: Arc<AppState>, ui_dir: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/api/queue/next", get(next_item))
        .route("/api/labels", get(export_labels).post(post_label))
        .route("/api/progress", get(progress))
        .with_state(state);
    match ui_dir {
        Some(dir) => api.fallback_service(tower_http::services::ServeDir::new(dir)),
        None => api.route("/", get(|| async { Html(PLACEHOLDER) })),
    }
}

/// Serves until interrupted.
pub async fn serve(state: AppState, addr: SocketAddr, ui_dir: Option<&Path>) -> Result<()> {
    let app = router(Arc::new(state), ui_dir);
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("annotation service listening on http://{}", listener.local_addr()?);
    eprintln!("annotation service listening on http://{}", listener.local_addr()?);
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_reports_every_bad_field() {
        let problems = parse_record(br#"{"atom_id":"","valid":"yes","effect":7}"#).unwrap_err();
        let fields: Vec<_> = problems.iter().map(|p| p.field.as_str()).collect();
        assert_eq!(fields, ["atom_id", "annotator_id", "valid", "effect"]);
        assert_eq!(parse_record(b"[1]").unwrap_err()[0].field, "body");
    }

    #[test]
    fn parse_fills_missing_timestamp() {
        let r = parse_record(br#"{"atom_id":"a","annotator_id":"x","valid":true,"effect":-2}"#).unwrap();
        assert_eq!(r.effect, Some(EffectScore::Score(-2)));
        assert!(!r.timestamp.is_empty());
    }
}
