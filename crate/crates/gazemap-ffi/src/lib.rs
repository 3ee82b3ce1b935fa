//! C ABI over the gazemap toolchain.
//!
//! Conventions: every fallible call returns a [`GmStatus`]; `GM_STATUS_OK`
//! is zero. On failure a human-readable description is kept per thread and
//! readable through [`gm_last_error_message`] until the next failure on the
//! same thread. Handles (`GmGraph`, `GmRaster`) are opaque, owned by the
//! caller and released with their `_free` function; `_free` and the result
//! strings tolerate NULL. Panics never unwind across the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use gazemap::geo::GeoPoint;
use gazemap::matching::{GpsTrace, MatchParams, Matcher};
use gazemap::metrics::{self, SaliencyMap};
use gazemap::osm::StreetGraph;
use gazemap::patch::{heading_from_route, sample_patch, PatchRequest, CLIP_LEN};
use gazemap::pipeline::{run_pipeline, PipelineConfig};
use gazemap::raster::RasterMap;

/// Outcome of a gazemap call.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum GmStatus {
    Ok = 0,
    /// A required pointer argument was NULL.
    NullArgument = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// An argument value was out of range or malformed.
    InvalidArgument = 3,
    /// Reading or writing a file failed.
    Io = 4,
    /// Input data did not parse (OSM, CSV, JSON, PGM, tensor).
    Parse = 5,
    /// Map matching failed (empty trace, no candidates, broken route).
    Match = 6,
    /// A pipeline stage failed; see the error message for the stage.
    Pipeline = 7,
    /// Unexpected internal failure.
    Internal = 8,
}

/// Opaque drivable street graph.
pub struct GmGraph(StreetGraph);

/// Opaque rasterized street map with its geo transform.
pub struct GmRaster(RasterMap);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn fail(status: GmStatus, msg: impl std::fmt::Display) -> GmStatus {
    let text = msg.to_string().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).expect("NUL stripped"));
    status
}

/// Description of the most recent failure on the calling thread. Borrowed;
/// valid until the next failing gazemap call on this thread. Never NULL.
#[no_mangle]
pub extern "C" fn gm_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version, static NUL-terminated string.
#[no_mangle]
pub extern "C" fn gm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, GmStatus> {
    if p.is_null() {
        return Err(fail(GmStatus::NullArgument, format!("{what} is NULL")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(GmStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, GmStatus> {
    p.as_mut().ok_or_else(|| fail(GmStatus::NullArgument, format!("{what} is NULL")))
}

unsafe fn handle_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, GmStatus> {
    p.as_ref().ok_or_else(|| fail(GmStatus::NullArgument, format!("{what} is NULL")))
}

/// Runs `f` with panics converted to `GM_STATUS_INTERNAL`.
fn guarded(f: impl FnOnce() -> Result<GmStatus, GmStatus>) -> GmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(s)) | Ok(Err(s)) => s,
        Err(_) => fail(GmStatus::Internal, "internal panic"),
    }
}

// ---------------------------------------------------------------------------
// graphs

/// Parse an OSM XML file into a street graph. The caller owns `*out` and
/// frees it with `gm_graph_free`.
#[no_mangle]
pub unsafe extern "C" fn gm_graph_from_osm_file(
    path: *const c_char,
    out: *mut *mut GmGraph,
) -> GmStatus {
    guarded(|| {
        let path = str_arg(path, "path")?;
        let out = out_arg(out, "out")?;
        let parsed = gazemap::osm::parse_osm_file(path)
            .map_err(|e| fail(GmStatus::Parse, e))?;
        *out = Box::into_raw(Box::new(GmGraph(parsed.graph)));
        Ok(GmStatus::Ok)
    })
}

/// Load a street graph from its JSON serialization.
#[no_mangle]
pub unsafe extern "C" fn gm_graph_from_json_file(
    path: *const c_char,
    out: *mut *mut GmGraph,
) -> GmStatus {
    guarded(|| {
        let path = str_arg(path, "path")?;
        let out = out_arg(out, "out")?;
        let graph = StreetGraph::load_json(path).map_err(|e| fail(GmStatus::Parse, e))?;
        *out = Box::into_raw(Box::new(GmGraph(graph)));
        Ok(GmStatus::Ok)
    })
}

/// Write a street graph as JSON.
#[no_mangle]
pub unsafe extern "C" fn gm_graph_save_json(
    graph: *const GmGraph,
    path: *const c_char,
) -> GmStatus {
    guarded(|| {
        let graph = handle_arg(graph, "graph")?;
        let path = str_arg(path, "path")?;
        graph.0.save_json(path).map_err(|e| fail(GmStatus::Io, e))?;
        Ok(GmStatus::Ok)
    })
}

/// Node and edge counts of a graph. Either output may be NULL.
#[no_mangle]
pub unsafe extern "C" fn gm_graph_counts(
    graph: *const GmGraph,
    out_nodes: *mut usize,
    out_edges: *mut usize,
) -> GmStatus {
    guarded(|| {
        let graph = handle_arg(graph, "graph")?;
        if let Some(n) = out_nodes.as_mut() {
            *n = graph.0.nodes().len();
        }
        if let Some(e) = out_edges.as_mut() {
            *e = graph.0.edges().len();
        }
        Ok(GmStatus::Ok)
    })
}

#[no_mangle]
pub unsafe extern "C" fn gm_graph_free(graph: *mut GmGraph) {
    if !graph.is_null() {
        drop(Box::from_raw(graph));
    }
}

// ---------------------------------------------------------------------------
// rasters

/// Rasterize every edge of a graph. The caller owns `*out` and frees it
/// with `gm_raster_free`.
#[no_mangle]
pub unsafe extern "C" fn gm_raster_from_graph(
    graph: *const GmGraph,
    m_per_px: f64,
    line_width_px: f64,
    out: *mut *mut GmRaster,
) -> GmStatus {
    guarded(|| {
        let graph = handle_arg(graph, "graph")?;
        let out = out_arg(out, "out")?;
        let raster = RasterMap::rasterize_graph(&graph.0, m_per_px, line_width_px)
            .map_err(|e| fail(GmStatus::InvalidArgument, e))?;
        *out = Box::into_raw(Box::new(GmRaster(raster)));
        Ok(GmStatus::Ok)
    })
}

/// Load a raster from a PGM written by `gm_raster_save_pgm` (the JSON geo
/// sidecar must sit next to it).
#[no_mangle]
pub unsafe extern "C" fn gm_raster_load_pgm(
    path: *const c_char,
    out: *mut *mut GmRaster,
) -> GmStatus {
    guarded(|| {
        let path = str_arg(path, "path")?;
        let out = out_arg(out, "out")?;
        let raster = RasterMap::load(path).map_err(|e| fail(GmStatus::Parse, e))?;
        *out = Box::into_raw(Box::new(GmRaster(raster)));
        Ok(GmStatus::Ok)
    })
}

/// Write the raster as PGM plus its JSON geo sidecar.
#[no_mangle]
pub unsafe extern "C" fn gm_raster_save_pgm(
    raster: *const GmRaster,
    path: *const c_char,
) -> GmStatus {
    guarded(|| {
        let raster = handle_arg(raster, "raster")?;
        let path = str_arg(path, "path")?;
        raster.0.save(path).map_err(|e| fail(GmStatus::Io, e))?;
        Ok(GmStatus::Ok)
    })
}

/// Raster dimensions in pixels. Either output may be NULL.
#[no_mangle]
pub unsafe extern "C" fn gm_raster_size(
    raster: *const GmRaster,
    out_width: *mut usize,
    out_height: *mut usize,
) -> GmStatus {
    guarded(|| {
        let raster = handle_arg(raster, "raster")?;
        let t = raster.0.transform();
        if let Some(w) = out_width.as_mut() {
            *w = t.width_px;
        }
        if let Some(h) = out_height.as_mut() {
            *h = t.height_px;
        }
        Ok(GmStatus::Ok)
    })
}

#[no_mangle]
pub unsafe extern "C" fn gm_raster_free(raster: *mut GmRaster) {
    if !raster.is_null() {
        drop(Box::from_raw(raster));
    }
}

// ---------------------------------------------------------------------------
// map matching

/// HMM-match a GPS trace CSV (`t,lat,lon` header) against the graph and
/// write per-frame snapped fixes as CSV. `n_frames == 0` derives the frame
/// count from the trace span and `frame_rate_hz`.
#[no_mangle]
pub unsafe extern "C" fn gm_match_trace_file(
    graph: *const GmGraph,
    trace_csv: *const c_char,
    out_csv: *const c_char,
    sigma_z_m: f64,
    beta_m: f64,
    gps_rate_hz: f64,
    frame_rate_hz: f64,
    n_frames: usize,
) -> GmStatus {
    guarded(|| {
        let graph = handle_arg(graph, "graph")?;
        let trace_csv = str_arg(trace_csv, "trace_csv")?;
        let out_csv = str_arg(out_csv, "out_csv")?;
        let trace = GpsTrace::read_csv_file(trace_csv, gps_rate_hz)
            .map_err(|e| fail(GmStatus::Parse, e))?;
        let params = MatchParams { sigma_z_m, beta_m, ..MatchParams::default() };
        let matcher = Matcher::new(&graph.0).map_err(|e| fail(GmStatus::Match, e))?;
        let result =
            matcher.match_trace(&trace, &params).map_err(|e| fail(GmStatus::Match, e))?;
        let n_frames = if n_frames > 0 {
            n_frames
        } else {
            let span = trace.samples.last().unwrap().t - trace.samples[0].t;
            (span * frame_rate_hz).round() as usize + 1
        };
        let fixes = matcher
            .interpolate_to_frames(&trace, &result.states, frame_rate_hz, n_frames)
            .map_err(|e| fail(GmStatus::Match, e))?;
        fixes.write_csv(out_csv).map_err(|e| fail(GmStatus::Io, e))?;
        Ok(GmStatus::Ok)
    })
}

// ---------------------------------------------------------------------------
// patches

/// Cut a heading-up map+route patch and write it as an f32 tensor (`.bin`
/// plus JSON sidecar). `route_lat_lon` holds `route_len` interleaved
/// `lat, lon` pairs; `route_len` must be 16. A non-finite `heading_deg`
/// means "derive the heading from the route".
#[no_mangle]
pub unsafe extern "C" fn gm_patch_sample(
    raster: *const GmRaster,
    route_lat_lon: *const f64,
    route_len: usize,
    heading_deg: f64,
    radius_m: f64,
    out_size_px: usize,
    out_path: *const c_char,
) -> GmStatus {
    guarded(|| {
        let raster = handle_arg(raster, "raster")?;
        let out_path = str_arg(out_path, "out_path")?;
        if route_lat_lon.is_null() {
            return Err(fail(GmStatus::NullArgument, "route_lat_lon is NULL"));
        }
        if route_len != CLIP_LEN {
            return Err(fail(
                GmStatus::InvalidArgument,
                format!("route_len must be {CLIP_LEN}, got {route_len}"),
            ));
        }
        let flat = std::slice::from_raw_parts(route_lat_lon, 2 * route_len);
        let route: Vec<GeoPoint> =
            flat.chunks_exact(2).map(|c| GeoPoint { lat: c[0], lon: c[1] }).collect();
        let heading = if heading_deg.is_finite() {
            heading_deg
        } else {
            heading_from_route(&route, None).map_err(|e| fail(GmStatus::InvalidArgument, e))?
        };
        let center = route[route.len() - 1];
        let req = PatchRequest::new(center, heading, radius_m, route, out_size_px)
            .map_err(|e| fail(GmStatus::InvalidArgument, e))?;
        let patch = sample_patch(&raster.0, &req).map_err(|e| fail(GmStatus::Internal, e))?;
        patch.save(out_path).map_err(|e| fail(GmStatus::Io, e))?;
        Ok(GmStatus::Ok)
    })
}

// ---------------------------------------------------------------------------
// metrics

fn load_map(path: &str) -> Result<SaliencyMap, GmStatus> {
    let loaded = if Path::new(path).extension().is_some_and(|e| e == "pgm") {
        SaliencyMap::from_pgm(path)
    } else {
        SaliencyMap::from_float_binary(path)
    };
    loaded.map_err(|e| fail(GmStatus::Parse, format!("{path}: {e}")))
}

/// Score a predicted saliency map against ground truth. Both files may be
/// PGM or f32 tensors (picked by extension). Fixations are the ground-truth
/// cells at or above `fixation_percentile`. Outputs may be NULL when a
/// metric is not wanted; CC is NaN when either map is constant.
#[no_mangle]
pub unsafe extern "C" fn gm_saliency_metrics_from_files(
    pred_path: *const c_char,
    gt_path: *const c_char,
    fixation_percentile: f64,
    out_kld: *mut f64,
    out_cc: *mut f64,
    out_nss: *mut f64,
    out_sim: *mut f64,
) -> GmStatus {
    guarded(|| {
        let pred = load_map(str_arg(pred_path, "pred_path")?)?;
        let gt = load_map(str_arg(gt_path, "gt_path")?)?;
        let err = |e| fail(GmStatus::InvalidArgument, e);
        if let Some(v) = out_kld.as_mut() {
            *v = metrics::kld(&pred, &gt).map_err(err)?;
        }
        if let Some(v) = out_cc.as_mut() {
            *v = metrics::cc(&pred, &gt).map_err(err)?;
        }
        if let Some(v) = out_nss.as_mut() {
            let fix = metrics::fixations_from_map(&gt, fixation_percentile).map_err(err)?;
            *v = metrics::nss(&pred, &fix).map_err(err)?;
        }
        if let Some(v) = out_sim.as_mut() {
            *v = metrics::sim(&pred, &gt).map_err(err)?;
        }
        Ok(GmStatus::Ok)
    })
}

// ---------------------------------------------------------------------------
// pipeline

/// Run the full pipeline described by a TOML config. On success and when
/// `out_report_json` is non-NULL it receives the metrics report as a JSON
/// string owned by the caller; release it with `gm_string_free`.
#[no_mangle]
pub unsafe extern "C" fn gm_pipeline_run(
    config_path: *const c_char,
    jobs: usize,
    out_report_json: *mut *mut c_char,
) -> GmStatus {
    guarded(|| {
        let config_path = str_arg(config_path, "config_path")?;
        let cfg = PipelineConfig::from_toml_file(config_path)
            .map_err(|e| fail(GmStatus::Parse, e))?;
        let report = run_pipeline(&cfg, jobs).map_err(|e| fail(GmStatus::Pipeline, e))?;
        if let Some(out) = out_report_json.as_mut() {
            let json = serde_json::to_string(&report)
                .map_err(|e| fail(GmStatus::Internal, e))?
                .replace('\0', " ");
            *out = CString::new(json).expect("NUL stripped").into_raw();
        }
        Ok(GmStatus::Ok)
    })
}

/// Release a string returned by this library. NULL is a no-op.
#[no_mangle]
pub unsafe extern "C" fn gm_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
