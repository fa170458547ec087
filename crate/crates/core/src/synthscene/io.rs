//! Dataset directory layout: left/%06d.pgm, right/%06d.pgm, depth/%06d.pgm
//! (16-bit, millimeters), mask/%06d.pgm, gt_poses.csv, scene.cfg. The config
//! file stores the full scene description, so a loaded dataset regains exact
//! analytic geometry; only the raster depth is millimeter-quantized.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::Vector3;

use super::{SceneError, SceneSpec, StereoFrame, SyntheticDataset, TexturedRect};
use crate::geometry::{read_trajectory, write_trajectory, TrajectoryEntry};
use crate::image::{DepthMap, GrayImage, RegionMask};

/// Seconds between consecutive frames in gt_poses.csv.
pub const FRAME_PERIOD: f64 = 0.1;

fn vec3_str(v: &Vector3<f64>) -> String {
    // Display for f64 is the shortest representation that parses back
    // bit-exactly, so the config round trip is lossless.
    format!("{} {} {}", v.x, v.y, v.z)
}

fn parse_vec3(s: &str, key: &str) -> Result<Vector3<f64>, SceneError> {
    let parts: Vec<&str> = s.split_whitespace().collect();
    if parts.len() != 3 {
        return Err(SceneError::BadConfig(format!("{key}: expected 3 numbers, got {s:?}")));
    }
    let mut v = [0.0; 3];
    for (i, p) in parts.iter().enumerate() {
        v[i] = p
            .parse()
            .map_err(|_| SceneError::BadConfig(format!("{key}: bad number {p:?}")))?;
    }
    Ok(Vector3::new(v[0], v[1], v[2]))
}

pub fn write_scene_cfg(path: &Path, spec: &SceneSpec) -> Result<(), SceneError> {
    let mut out = String::new();
    let mut kv = |k: &str, v: String| {
        let _ = writeln!(out, "{k} = {v}");
    };
    kv("seed", spec.seed.to_string());
    kv("width", spec.width.to_string());
    kv("height", spec.height.to_string());
    kv("landmark_count", spec.landmark_count.to_string());
    kv("brightness", spec.brightness.to_string());
    kv("static_plane_count", spec.static_planes.len().to_string());
    for (i, r) in spec.static_planes.iter().enumerate() {
        kv(&format!("static{i}_center"), vec3_str(&r.center));
        kv(&format!("static{i}_axis_u"), vec3_str(&r.axis_u));
        kv(&format!("static{i}_axis_v"), vec3_str(&r.axis_v));
        kv(&format!("static{i}_richness"), r.richness.to_string());
    }
    let d = &spec.dynamic_region;
    kv("dynamic_center", vec3_str(&d.center));
    kv("dynamic_axis_u", vec3_str(&d.axis_u));
    kv("dynamic_axis_v", vec3_str(&d.axis_v));
    kv("dynamic_richness", d.richness.to_string());
    fs::write(path, out)?;
    Ok(())
}

pub fn read_scene_cfg(path: &Path) -> Result<SceneSpec, SceneError> {
    let text = fs::read_to_string(path)?;
    let mut map: BTreeMap<String, String> = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            SceneError::BadConfig(format!("line {}: expected key = value", lineno + 1))
        })?;
        let prev = map.insert(k.trim().to_string(), v.trim().to_string());
        if prev.is_some() {
            return Err(SceneError::BadConfig(format!("duplicate key {:?}", k.trim())));
        }
    }

    let mut take = |key: &str| -> Result<String, SceneError> {
        map.remove(key).ok_or_else(|| SceneError::BadConfig(format!("missing key {key:?}")))
    };
    let parse_num = |key: &str, val: &str| -> Result<f64, SceneError> {
        val.parse().map_err(|_| SceneError::BadConfig(format!("{key}: bad number {val:?}")))
    };

    let seed: u64 = take("seed")?
        .parse()
        .map_err(|_| SceneError::BadConfig("seed: not an integer".into()))?;
    let width = parse_num("width", &take("width")?)? as usize;
    let height = parse_num("height", &take("height")?)? as usize;
    let landmark_count = parse_num("landmark_count", &take("landmark_count")?)? as usize;
    let brightness = parse_num("brightness", &take("brightness")?)?;
    let n_planes = parse_num("static_plane_count", &take("static_plane_count")?)? as usize;

    let mut static_planes = Vec::with_capacity(n_planes);
    for i in 0..n_planes {
        let center = parse_vec3(&take(&format!("static{i}_center"))?, "center")?;
        let axis_u = parse_vec3(&take(&format!("static{i}_axis_u"))?, "axis_u")?;
        let axis_v = parse_vec3(&take(&format!("static{i}_axis_v"))?, "axis_v")?;
        let richness = parse_num("richness", &take(&format!("static{i}_richness"))?)?;
        static_planes.push(TexturedRect { center, axis_u, axis_v, richness });
    }
    let dynamic_region = TexturedRect {
        center: parse_vec3(&take("dynamic_center")?, "dynamic_center")?,
        axis_u: parse_vec3(&take("dynamic_axis_u")?, "dynamic_axis_u")?,
        axis_v: parse_vec3(&take("dynamic_axis_v")?, "dynamic_axis_v")?,
        richness: parse_num("dynamic_richness", &take("dynamic_richness")?)?,
    };

    if let Some(extra) = map.keys().next() {
        return Err(SceneError::BadConfig(format!("unknown key {extra:?}")));
    }
    let spec = SceneSpec {
        seed,
        width,
        height,
        static_planes,
        dynamic_region,
        landmark_count,
        brightness,
    };
    spec.validate()?;
    Ok(spec)
}

pub fn save_dataset(dir: &Path, ds: &SyntheticDataset) -> Result<(), SceneError> {
    for sub in ["left", "right", "depth", "mask"] {
        fs::create_dir_all(dir.join(sub))?;
    }
    for (i, frame) in ds.frames.iter().enumerate() {
        frame.left.write_pgm(&dir.join(format!("left/{i:06}.pgm")))?;
        frame.right.write_pgm(&dir.join(format!("right/{i:06}.pgm")))?;
        ds.gt_depth[i].write_pgm_millimeters(&dir.join(format!("depth/{i:06}.pgm")))?;
        ds.gt_region_mask[i].write_pgm(&dir.join(format!("mask/{i:06}.pgm")))?;
    }
    let entries: Vec<TrajectoryEntry> = ds
        .gt_poses
        .iter()
        .enumerate()
        .map(|(i, &pose)| TrajectoryEntry { timestamp: i as f64 * FRAME_PERIOD, pose })
        .collect();
    write_trajectory(&dir.join("gt_poses.csv"), &entries)?;
    write_scene_cfg(&dir.join("scene.cfg"), &ds.spec)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<SyntheticDataset, SceneError> {
    let spec = read_scene_cfg(&dir.join("scene.cfg"))?;
    let entries = read_trajectory(&dir.join("gt_poses.csv"))?;
    let mut frames = Vec::with_capacity(entries.len());
    let mut gt_depth = Vec::with_capacity(entries.len());
    let mut gt_region_mask = Vec::with_capacity(entries.len());
    for i in 0..entries.len() {
        frames.push(StereoFrame {
            left: GrayImage::read_pgm(&dir.join(format!("left/{i:06}.pgm")))?,
            right: GrayImage::read_pgm(&dir.join(format!("right/{i:06}.pgm")))?,
        });
        gt_depth.push(DepthMap::read_pgm_millimeters(&dir.join(format!("depth/{i:06}.pgm")))?);
        gt_region_mask.push(RegionMask::read_pgm(&dir.join(format!("mask/{i:06}.pgm")))?);
    }
    let landmarks = spec.landmarks();
    Ok(SyntheticDataset {
        spec,
        frames,
        gt_poses: entries.into_iter().map(|e| e.pose).collect(),
        gt_depth,
        gt_region_mask,
        landmarks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthscene::{example_rig, render_sequence, sway_trajectory};

    #[test]
    fn scene_cfg_round_trip_exact() {
        let dir = std::env::temp_dir().join("featrack_scene_cfg");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("scene.cfg");
        let mut spec = SceneSpec::example(123456789, 128, 96);
        spec.brightness = 0.937_251;
        spec.static_planes[0].center.x = 0.1 + 0.2; // deliberately non-representable
        write_scene_cfg(&path, &spec).unwrap();
        let back = read_scene_cfg(&path).unwrap();
        assert_eq!(spec, back);
    }

    #[test]
    fn scene_cfg_rejects_unknown_key() {
        let dir = std::env::temp_dir().join("featrack_scene_cfg");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.cfg");
        let spec = SceneSpec::example(1, 64, 48);
        write_scene_cfg(&path, &spec).unwrap();
        let mut text = fs::read_to_string(&path).unwrap();
        text.push_str("mystery_knob = 3\n");
        fs::write(&path, text).unwrap();
        let err = read_scene_cfg(&path);
        assert!(matches!(err, Err(SceneError::BadConfig(_))), "unknown key accepted");
    }

    #[test]
    fn dataset_round_trip() {
        let dir = std::env::temp_dir().join("featrack_ds_round_trip");
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(&dir).unwrap();
        let spec = SceneSpec::example(77, 64, 48);
        let rig = example_rig(64, 48);
        let ds = render_sequence(&spec, &sway_trajectory(3, 0.1), &rig).unwrap();
        save_dataset(&dir, &ds).unwrap();
        let back = load_dataset(&dir).unwrap();
        assert_eq!(back.spec, ds.spec);
        assert_eq!(back.frames.len(), 3);
        assert_eq!(back.frames[1].left, ds.frames[1].left);
        assert_eq!(back.frames[2].right, ds.frames[2].right);
        assert_eq!(back.gt_region_mask[0], ds.gt_region_mask[0]);
        // raster depth is mm-quantized
        for y in 0..48 {
            for x in 0..64 {
                assert!((back.gt_depth[0].get(x, y) - ds.gt_depth[0].get(x, y)).abs() <= 5e-4 + 1e-9);
            }
        }
        for (a, b) in ds.gt_poses.iter().zip(&back.gt_poses) {
            let (dr, dt) = crate::geometry::PoseSE3::difference(a, b);
            assert!(dr < 1e-9 && dt < 1e-8);
        }
        assert_eq!(back.landmarks.len(), ds.landmarks.len());
    }
}
