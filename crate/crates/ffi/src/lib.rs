//! C ABI over the kenas energy model: graphs, profiles and fusion rules are
//! opaque handles, every fallible call returns a [`KenasStatus`] and writes its
//! result through an out-pointer. The message of the last failure on the
//! calling thread is available from [`kenas_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use kenas::cost::{estimate_energy, total_power, PlatformProfile};
use kenas::fusion::{default_rules, load_rules, parse_rules, plan_for, FusionRule};
use kenas::graph::ComputationGraph;
use kenas::nas::{energy_saving, objective, ObjectiveKind, RewardConfig};
use kenas::space::{ArchitectureSpec, Family, SpaceDef};
use kenas::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KenasStatus {
    Ok = 0,
    Io = 1,
    Json = 2,
    Graph = 3,
    Rules = 4,
    InvalidArgument = 5,
    Data = 6,
    Dimension = 7,
    Budget = 8,
    Space = 9,
    Checkpoint = 10,
    NullPointer = 11,
    Utf8 = 12,
    Panic = 13,
}

impl From<&Error> for KenasStatus {
    fn from(e: &Error) -> Self {
        match e.code() {
            "io" => KenasStatus::Io,
            "json" => KenasStatus::Json,
            "graph" => KenasStatus::Graph,
            "rules" => KenasStatus::Rules,
            "data" => KenasStatus::Data,
            "dimension" => KenasStatus::Dimension,
            "budget" => KenasStatus::Budget,
            "space" => KenasStatus::Space,
            "checkpoint" => KenasStatus::Checkpoint,
            _ => KenasStatus::InvalidArgument,
        }
    }
}

/// Objective selector for [`kenas_objective`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KenasObjective {
    Proposed = 0,
    Conventional = 1,
    AdaptedEtnas = 2,
}

/// Operator graph with inferred shapes.
pub struct KenasGraph(ComputationGraph);

/// Platform latency and power profile.
pub struct KenasProfile(PlatformProfile);

/// Ordered list of fusion rules.
pub struct KenasRules(Vec<FusionRule>);

/// Architecture search space.
pub struct KenasSpace(SpaceDef);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Fail(KenasStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(KenasStatus::from(&e), e.to_string())
    }
}

/// Runs `f`, catching panics and recording any failure message.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> KenasStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            KenasStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            KenasStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(KenasStatus::NullPointer, format!("`{what}` is null"))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(KenasStatus::Utf8, format!("`{what}` is not valid UTF-8")))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn put<T>(out: *mut T, value: T, what: &str) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null(what));
    }
    out.write(value);
    Ok(())
}

unsafe fn put_string(out: *mut *mut c_char, s: String) -> Result<(), Fail> {
    let c = CString::new(s).map_err(|_| Fail(KenasStatus::Utf8, "output contains a NUL byte".into()))?;
    put(out, c.into_raw(), "out")
}

/// Null `rules` selects the built-in rule set.
unsafe fn rules_or_default(rules: *const KenasRules) -> Vec<FusionRule> {
    match rules.as_ref() {
        Some(r) => r.0.clone(),
        None => default_rules(),
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn kenas_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn kenas_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Frees a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from a kenas function and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn kenas_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Parses a graph from JSON and infers missing shapes.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn kenas_graph_from_json(json: *const c_char, out: *mut *mut KenasGraph) -> KenasStatus {
    guard(|| {
        let g = ComputationGraph::from_json(text(json, "json")?)?.shaped()?;
        put(out, Box::into_raw(Box::new(KenasGraph(g))), "out")
    })
}

/// Loads a graph file and infers missing shapes.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn kenas_graph_load(path: *const c_char, out: *mut *mut KenasGraph) -> KenasStatus {
    guard(|| {
        let g = ComputationGraph::load(text(path, "path")?)?.shaped()?;
        put(out, Box::into_raw(Box::new(KenasGraph(g))), "out")
    })
}

/// Number of operator nodes, boundary nodes included.
///
/// # Safety
/// `graph` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn kenas_graph_node_count(graph: *const KenasGraph, out: *mut usize) -> KenasStatus {
    guard(|| put(out, handle(graph, "graph")?.0.nodes.len(), "out"))
}

/// # Safety
/// `graph` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn kenas_graph_free(graph: *mut KenasGraph) {
    if !graph.is_null() {
        drop(Box::from_raw(graph));
    }
}

/// Built-in profile by name: `synthetic-edge` or `synthetic-workstation`.
///
/// # Safety
/// `name` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn kenas_profile_builtin(name: *const c_char, out: *mut *mut KenasProfile) -> KenasStatus {
    guard(|| {
        let p = match text(name, "name")? {
            "synthetic-edge" => PlatformProfile::synthetic_edge(),
            "synthetic-workstation" => PlatformProfile::synthetic_workstation(),
            other => {
                return Err(Fail(KenasStatus::InvalidArgument, format!("unknown built-in profile `{other}`")));
            }
        };
        put(out, Box::into_raw(Box::new(KenasProfile(p))), "out")
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn kenas_profile_load(path: *const c_char, out: *mut *mut KenasProfile) -> KenasStatus {
    guard(|| {
        let p = PlatformProfile::load(text(path, "path")?)?;
        put(out, Box::into_raw(Box::new(KenasProfile(p))), "out")
    })
}

/// Copy of `profile` with every latency multiplied by `factor`.
///
/// # Safety
/// `profile` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn kenas_profile_scale_latency(
    profile: *const KenasProfile,
    factor: f64,
    out: *mut *mut KenasProfile,
) -> KenasStatus {
    guard(|| {
        let p = handle(profile, "profile")?.0.with_scaled_latency(factor)?;
        put(out, Box::into_raw(Box::new(KenasProfile(p))), "out")
    })
}

/// # Safety
/// `profile` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn kenas_profile_free(profile: *mut KenasProfile) {
    if !profile.is_null() {
        drop(Box::from_raw(profile));
    }
}

/// Parses rules in the text format, one pattern per line.
///
/// # Safety
/// `source` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn kenas_rules_parse(source: *const c_char, out: *mut *mut KenasRules) -> KenasStatus {
    guard(|| {
        let r = parse_rules(text(source, "source")?)?;
        put(out, Box::into_raw(Box::new(KenasRules(r))), "out")
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn kenas_rules_load(path: *const c_char, out: *mut *mut KenasRules) -> KenasStatus {
    guard(|| {
        let r = load_rules(text(path, "path")?)?;
        put(out, Box::into_raw(Box::new(KenasRules(r))), "out")
    })
}

/// # Safety
/// `rules` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn kenas_rules_free(rules: *mut KenasRules) {
    if !rules.is_null() {
        drop(Box::from_raw(rules));
    }
}

/// Predicted inference energy in mJ. Null `rules` uses the built-in set.
///
/// # Safety
/// `graph` and `profile` must be live handles; `rules` null or live;
/// `out_mj` writable.
#[no_mangle]
pub unsafe extern "C" fn kenas_estimate_energy(
    graph: *const KenasGraph,
    rules: *const KenasRules,
    profile: *const KenasProfile,
    batch: u64,
    out_mj: *mut f64,
) -> KenasStatus {
    guard(|| {
        let g = &handle(graph, "graph")?.0;
        let p = &handle(profile, "profile")?.0;
        let est = estimate_energy(g, &rules_or_default(rules), p, batch)?;
        put(out_mj, est.total_energy_mj, "out_mj")
    })
}

/// Full per-kernel estimate as JSON; free with [`kenas_string_free`].
///
/// # Safety
/// As [`kenas_estimate_energy`], with `out` writable.
#[no_mangle]
pub unsafe extern "C" fn kenas_estimate_json(
    graph: *const KenasGraph,
    rules: *const KenasRules,
    profile: *const KenasProfile,
    batch: u64,
    out: *mut *mut c_char,
) -> KenasStatus {
    guard(|| {
        let g = &handle(graph, "graph")?.0;
        let p = &handle(profile, "profile")?.0;
        let est = estimate_energy(g, &rules_or_default(rules), p, batch)?;
        put_string(out, est.to_json())
    })
}

/// Summed kernel power in W.
///
/// # Safety
/// As [`kenas_estimate_energy`].
#[no_mangle]
pub unsafe extern "C" fn kenas_total_power(
    graph: *const KenasGraph,
    rules: *const KenasRules,
    profile: *const KenasProfile,
    batch: u64,
    out_w: *mut f64,
) -> KenasStatus {
    guard(|| {
        let g = &handle(graph, "graph")?.0;
        let p = &handle(profile, "profile")?.0;
        put(out_w, total_power(g, &rules_or_default(rules), p, batch)?, "out_w")
    })
}

/// Fused and merged kernel plan as JSON; free with [`kenas_string_free`].
///
/// # Safety
/// `graph` must be a live handle; `rules` null or live; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn kenas_detect_kernels_json(
    graph: *const KenasGraph,
    rules: *const KenasRules,
    max_parallel: usize,
    out: *mut *mut c_char,
) -> KenasStatus {
    guard(|| {
        let plan = plan_for(&handle(graph, "graph")?.0, &rules_or_default(rules), max_parallel)?;
        put_string(out, plan.to_json())
    })
}

/// Search objective with the default exponents (-2 below target, -0.5 above).
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn kenas_objective(
    measure: f64,
    accuracy: f64,
    target: f64,
    kind: KenasObjective,
    out: *mut f64,
) -> KenasStatus {
    guard(|| {
        let kind = match kind {
            KenasObjective::Proposed => ObjectiveKind::Proposed,
            KenasObjective::Conventional => ObjectiveKind::Conventional,
            KenasObjective::AdaptedEtnas => ObjectiveKind::AdaptedEtnas,
        };
        put(out, objective(measure, accuracy, &RewardConfig::new(target, kind))?, "out")
    })
}

/// Same as [`kenas_objective`] with explicit exponents.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn kenas_objective_with(
    measure: f64,
    accuracy: f64,
    target: f64,
    alpha: f64,
    beta: f64,
    out: *mut f64,
) -> KenasStatus {
    guard(|| {
        let cfg = RewardConfig { alpha, beta, ..RewardConfig::new(target, ObjectiveKind::Proposed) };
        put(out, objective(measure, accuracy, &cfg)?, "out")
    })
}

/// Percent energy saving of `new_mj` against `baseline_mj`, one decimal.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn kenas_energy_saving(baseline_mj: f64, new_mj: f64, out: *mut f64) -> KenasStatus {
    guard(|| put(out, energy_saving(baseline_mj, new_mj)?, "out"))
}

/// Built-in space for `family` (`mlp`, `resnet`, `fttransformer`).
///
/// # Safety
/// `family` must be a NUL-terminated string; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn kenas_space_builtin(
    family: *const c_char,
    input_dim: u64,
    output_dim: u64,
    out: *mut *mut KenasSpace,
) -> KenasStatus {
    guard(|| {
        let fam: Family = text(family, "family")?.parse()?;
        put(out, Box::into_raw(Box::new(KenasSpace(SpaceDef::builtin(fam, input_dim, output_dim)))), "out")
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn kenas_space_load(path: *const c_char, out: *mut *mut KenasSpace) -> KenasStatus {
    guard(|| {
        let s = SpaceDef::load(text(path, "path")?)?;
        put(out, Box::into_raw(Box::new(KenasSpace(s))), "out")
    })
}

/// Lowers an architecture spec given as JSON into a graph handle.
///
/// # Safety
/// `space` must be a live handle; `spec_json` NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn kenas_space_lower(
    space: *const KenasSpace,
    spec_json: *const c_char,
    out: *mut *mut KenasGraph,
) -> KenasStatus {
    guard(|| {
        let spec = ArchitectureSpec::from_json(text(spec_json, "spec_json")?)?;
        let g = handle(space, "space")?.0.lower(&spec)?;
        put(out, Box::into_raw(Box::new(KenasGraph(g))), "out")
    })
}

/// # Safety
/// `space` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn kenas_space_free(space: *mut KenasSpace) {
    if !space.is_null() {
        drop(Box::from_raw(space));
    }
}
