//! Regenerates the bundled pipeline fixtures under `fixtures/` at the repo
//! root: a synthetic grid-town OSM extract, a noisy 60 s GPS trace along
//! its streets, frame labels with one excluded (reversing) segment, one
//! ground-truth gaze map per kept segment, and the pipeline config tying
//! them together. Fully seeded; running it twice writes identical files.
//!
//!     cargo run --example make_fixtures

use std::fmt::Write as _;
use std::path::Path;

use gazemap::dataset::{self, VideoLabels};
use gazemap::geo::EARTH_RADIUS_M;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

const LAT0: f64 = 45.0;
const LON0: f64 = 7.0;
const GRID_N: usize = 11; // nodes per side; 10 blocks of 100 m
const BLOCK_M: f64 = 100.0;
const SPEED_MPS: f64 = 10.0;
const TRACE_SECONDS: usize = 60;
const FRAME_RATE_HZ: f64 = 2.0;
const GT_SIZE: usize = 128;

fn main() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures");
    std::fs::create_dir_all(root.join("gt")).expect("create fixtures dir");

    let deg_m = std::f64::consts::PI / 180.0 * EARTH_RADIUS_M;
    let dlat = BLOCK_M / deg_m;
    let dlon = BLOCK_M / (deg_m * LAT0.to_radians().cos());

    write_osm(&root.join("grid_town.osm"), dlat, dlon);
    write_trace(&root.join("trace.csv"), dlat, dlon);
    let labels = write_labels(&root.join("labels.csv"));
    write_gt_maps(&root.join("gt"), &labels);
    write_config(&root.join("config.toml"));
    println!("fixtures written to {}", root.canonicalize().unwrap().display());
}

fn node_id(i: usize, j: usize) -> usize {
    1 + i * GRID_N + j
}

/// 11x11 street grid plus a couple of non-drivable ways so the parser has
/// something to drop.
fn write_osm(path: &Path, dlat: f64, dlon: f64) {
    let mut xml = String::new();
    xml.push_str("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    xml.push_str("<osm version=\"0.6\" generator=\"make_fixtures\">\n");
    for i in 0..GRID_N {
        for j in 0..GRID_N {
            let lat = LAT0 + i as f64 * dlat;
            let lon = LON0 + j as f64 * dlon;
            writeln!(xml, "  <node id=\"{}\" lat=\"{lat:.9}\" lon=\"{lon:.9}\"/>", node_id(i, j))
                .unwrap();
        }
    }
    // East-west streets, one way per row.
    for i in 0..GRID_N {
        writeln!(xml, "  <way id=\"{}\">", 1000 + i).unwrap();
        for j in 0..GRID_N {
            writeln!(xml, "    <nd ref=\"{}\"/>", node_id(i, j)).unwrap();
        }
        let highway = if i == 5 { "primary" } else { "residential" };
        writeln!(xml, "    <tag k=\"highway\" v=\"{highway}\"/>").unwrap();
        writeln!(xml, "    <tag k=\"name\" v=\"East Street {i}\"/>").unwrap();
        xml.push_str("  </way>\n");
    }
    // North-south streets, one way per column.
    for j in 0..GRID_N {
        writeln!(xml, "  <way id=\"{}\">", 2000 + j).unwrap();
        for i in 0..GRID_N {
            writeln!(xml, "    <nd ref=\"{}\"/>", node_id(i, j)).unwrap();
        }
        writeln!(xml, "    <tag k=\"highway\" v=\"residential\"/>").unwrap();
        writeln!(xml, "    <tag k=\"maxspeed\" v=\"30\"/>").unwrap();
        xml.push_str("  </way>\n");
    }
    // A footpath and a building outline: present in the extract, not drivable.
    writeln!(xml, "  <way id=\"3000\">").unwrap();
    for j in [3, 4, 5] {
        writeln!(xml, "    <nd ref=\"{}\"/>", node_id(2, j)).unwrap();
    }
    xml.push_str("    <tag k=\"highway\" v=\"footway\"/>\n  </way>\n");
    writeln!(xml, "  <way id=\"3001\">").unwrap();
    for (i, j) in [(1, 1), (1, 2), (2, 2), (2, 1), (1, 1)] {
        writeln!(xml, "    <nd ref=\"{}\"/>", node_id(i, j)).unwrap();
    }
    xml.push_str("    <tag k=\"building\" v=\"yes\"/>\n  </way>\n");
    xml.push_str("</osm>\n");
    std::fs::write(path, xml).expect("write osm");
}

/// True path: east along row 5 from column 2 to column 5 (300 m), then
/// north along column 5 to row 8 (300 m), at 10 m/s. 1 Hz samples with
/// seeded 3 m Gaussian noise.
fn write_trace(path: &Path, dlat: f64, dlon: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let noise = Normal::new(0.0, 3.0).unwrap();
    let deg_m = std::f64::consts::PI / 180.0 * EARTH_RADIUS_M;
    let mut csv = String::from("t,lat,lon\n");
    for t in 0..=TRACE_SECONDS {
        let s = SPEED_MPS * t as f64;
        let (lat, lon) = if s <= 300.0 {
            (LAT0 + 5.0 * dlat, LON0 + 2.0 * dlon + s / BLOCK_M * dlon)
        } else {
            (LAT0 + 5.0 * dlat + (s - 300.0) / BLOCK_M * dlat, LON0 + 5.0 * dlon)
        };
        let east_m: f64 = noise.sample(&mut rng);
        let north_m: f64 = noise.sample(&mut rng);
        let lat = lat + north_m / deg_m;
        let lon = lon + east_m / (deg_m * LAT0.to_radians().cos());
        writeln!(csv, "{t}.0,{lat:.9},{lon:.9}").unwrap();
    }
    std::fs::write(path, csv).expect("write trace");
}

/// 121 frames (60 s at 2 fps): action phases covering all six classes, two
/// intersection windows, and a single reversing flag at frame 115 that
/// knocks out exactly the last segment.
fn write_labels(path: &Path) -> VideoLabels {
    let n_frames = (TRACE_SECONDS as f64 * FRAME_RATE_HZ) as usize + 1;
    let mut csv = String::from("frame,action,intersection_type,priority,flags\n");
    for f in 0..n_frames {
        let action = match f {
            0..=23 => "Acc",
            24..=47 => "None",
            48..=71 => "Dec",
            72..=87 => "Lat",
            88..=103 => "Lat/Lon",
            _ => "Stop",
        };
        let (itype, prio) = match f {
            25..=34 => ("Signalized", "RoW"),
            60..=69 => ("Unsignalized", "Yield"),
            _ => ("none", "n/a"),
        };
        let flags = if f == 115 { "reversing" } else { "" };
        writeln!(csv, "{f},{action},{itype},{prio},{flags}").unwrap();
    }
    std::fs::write(path, csv).expect("write labels");
    VideoLabels::read_csv_file(path, "v1").expect("labels round trip")
}

/// One synthetic gaze map per kept segment's last frame: a seeded Gaussian
/// blob, peak 1, on a faint floor.
fn write_gt_maps(dir: &Path, labels: &VideoLabels) {
    let segs = dataset::generate_segments("v1", labels.frames.len(), 16, 8);
    let (kept, excluded) = dataset::filter_segments(&segs, labels).expect("filter");
    println!("{} segments, {} kept, {} excluded", segs.len(), kept.len(), excluded.len());
    for seg in &kept {
        let mut rng = ChaCha8Rng::seed_from_u64(9000 + seg.start as u64);
        let cx: f64 = rng.random_range(30.0..98.0);
        let cy: f64 = rng.random_range(30.0..98.0);
        let sigma: f64 = rng.random_range(8.0..16.0);
        let grid = Array2::from_shape_fn((GT_SIZE, GT_SIZE), |(i, j)| {
            let d2 = (j as f64 - cx).powi(2) + (i as f64 - cy).powi(2);
            (0.02 + (-d2 / (2.0 * sigma * sigma)).exp()).min(1.0) as f32
        });
        gazemap::raster::write_pgm(&grid, dir.join(format!("{}.pgm", seg.sample_name())))
            .expect("write gt pgm");
    }
}

fn write_config(path: &Path) {
    let toml_text = r#"# Bundled toy pipeline: grid town, 60 s drive, synthetic gaze maps.

[paths]
osm = "grid_town.osm"
trace = "trace.csv"
labels = "labels.csv"
gt_dir = "gt"
out_dir = "out"

[raster]
m_per_px = 1.0
line_width_px = 2.0

[patch]
radius_m = 100.0
out_size_px = 128

[match]
sigma_z_m = 4.07
beta_m = 20.0
candidate_radius_m = 50.0
max_candidates_per_obs = 8
gps_rate_hz = 1.0
frame_rate_hz = 2.0

[segments]
video = "v1"
clip_len = 16
stride = 8

[fusion]
enabled = true
enc_blocks = [3]
channels = [8, 16, 32, 64]
base_hw = [32, 32]
seed = 42
scene_seed = 7

[eval]
fixation_percentile = 99.5
"#;
    std::fs::write(path, toml_text).expect("write config");
}
