//! HD map model: elements, the map container, and the ROI query that selects
//! elements visible to a posed camera.

use std::collections::BTreeSet;
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const UNIT_TOL: f64 = 1e-6;

/// Kinds of map elements. Only traffic signals are exercised by the
/// experiments; the data model carries the kind so rasters can assign one
/// color channel per kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElementKind {
    TrafficSignal,
    Sign,
    Pole,
}

impl Default for ElementKind {
    fn default() -> Self {
        ElementKind::TrafficSignal
    }
}

/// A 3D map element: an upright planar rectangle with a facing normal.
#[derive(Debug, Clone, PartialEq)]
pub struct MapElement {
    pub id: String,
    /// Center in the world frame, meters.
    pub center: Vector3<f64>,
    /// Unit facing direction in the world frame.
    pub normal: Vector3<f64>,
    /// Physical width, meters.
    pub width: f64,
    /// Physical height, meters.
    pub height: f64,
    pub kind: ElementKind,
}

impl MapElement {
    pub fn new(
        id: impl Into<String>,
        center: Vector3<f64>,
        normal: Vector3<f64>,
        width: f64,
        height: f64,
    ) -> Result<Self> {
        let e = MapElement {
            id: id.into(),
            center,
            normal,
            width,
            height,
            kind: ElementKind::TrafficSignal,
        };
        e.validate()?;
        Ok(e)
    }

    pub fn validate(&self) -> Result<()> {
        if (self.normal.norm() - 1.0).abs() > UNIT_TOL {
            return Err(Error::contract(format!(
                "element {}: normal must be unit length (got {})",
                self.id,
                self.normal.norm()
            )));
        }
        if !(self.width > 0.0) || !(self.height > 0.0) {
            return Err(Error::contract(format!(
                "element {}: width and height must be positive",
                self.id
            )));
        }
        Ok(())
    }
}

/// An HD map: a set of elements with unique ids.
#[derive(Debug, Clone, Default)]
pub struct HdMap {
    pub map_id: String,
    pub elements: Vec<MapElement>,
}

impl HdMap {
    pub fn new(map_id: impl Into<String>, elements: Vec<MapElement>) -> Result<Self> {
        let map = HdMap {
            map_id: map_id.into(),
            elements,
        };
        map.validate()?;
        Ok(map)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for e in &self.elements {
            e.validate()?;
            if !seen.insert(e.id.as_str()) {
                return Err(Error::schema(format!("duplicate element id {:?}", e.id)));
            }
        }
        Ok(())
    }

    pub fn element(&self, id: &str) -> Option<&MapElement> {
        self.elements.iter().find(|e| e.id == id)
    }

    /// Distinct kinds present, sorted; defines the raster channel order.
    pub fn kinds(&self) -> Vec<ElementKind> {
        let set: BTreeSet<ElementKind> = self.elements.iter().map(|e| e.kind).collect();
        set.into_iter().collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let file: MapFile =
            serde_json::from_str(&text).map_err(|e| Error::schema(format!("{path:?}: {e}")))?;
        let map = HdMap::from(file);
        map.validate()?;
        Ok(map)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = MapFile::from(self);
        std::fs::write(path, serde_json::to_string_pretty(&file)?)?;
        Ok(())
    }
}

/// ROI query thresholds. Defaults follow the distance threshold of 100 m and
/// the orientation threshold cos(5π/6).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoiConfig {
    /// Maximum camera-to-element distance, meters.
    pub tau_dis_m: f64,
    /// Upper bound on cos(angle between camera forward and element normal).
    pub tau_ori_cos: f64,
}

impl Default for RoiConfig {
    fn default() -> Self {
        RoiConfig {
            tau_dis_m: 100.0,
            // cos(5*pi/6)
            tau_ori_cos: -(3.0f64.sqrt()) / 2.0,
        }
    }
}

impl RoiConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_dis_m > 0.0) {
            return Err(Error::contract("tau_dis_m must be positive"));
        }
        if !(-1.0..=1.0).contains(&self.tau_ori_cos) {
            return Err(Error::contract("tau_ori_cos must lie in [-1, 1]"));
        }
        Ok(())
    }
}

/// Select the elements visible to a camera at `camera_position` looking along
/// `camera_forward`: strictly closer than `tau_dis_m` and facing the camera
/// (dot(forward, normal) strictly below `tau_ori_cos`). Order is stable by id.
pub fn query_roi<'a>(
    map: &'a HdMap,
    camera_position: &Vector3<f64>,
    camera_forward: &Vector3<f64>,
    cfg: &RoiConfig,
) -> Result<Vec<&'a MapElement>> {
    if (camera_forward.norm() - 1.0).abs() > UNIT_TOL {
        return Err(Error::contract(format!(
            "camera_forward must be unit length (got {})",
            camera_forward.norm()
        )));
    }
    cfg.validate()?;
    let mut hit: Vec<&MapElement> = map
        .elements
        .iter()
        .filter(|e| {
            let dist = (camera_position - e.center).norm();
            let cos = camera_forward.dot(&e.normal);
            dist < cfg.tau_dis_m && cos < cfg.tau_ori_cos
        })
        .collect();
    hit.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(hit)
}

// ---------------------------------------------------------------------------
// JSON map file schema

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MapFile {
    map_id: String,
    elements: Vec<ElementRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ElementRecord {
    id: String,
    center: [f64; 3],
    normal: [f64; 3],
    width_m: f64,
    height_m: f64,
    #[serde(default)]
    kind: ElementKind,
}

impl From<MapFile> for HdMap {
    fn from(f: MapFile) -> Self {
        HdMap {
            map_id: f.map_id,
            elements: f
                .elements
                .into_iter()
                .map(|r| MapElement {
                    id: r.id,
                    center: Vector3::from(r.center),
                    normal: Vector3::from(r.normal),
                    width: r.width_m,
                    height: r.height_m,
                    kind: r.kind,
                })
                .collect(),
        }
    }
}

impl From<&HdMap> for MapFile {
    fn from(m: &HdMap) -> Self {
        MapFile {
            map_id: m.map_id.clone(),
            elements: m
                .elements
                .iter()
                .map(|e| ElementRecord {
                    id: e.id.clone(),
                    center: [e.center.x, e.center.y, e.center.z],
                    normal: [e.normal.x, e.normal.y, e.normal.z],
                    width_m: e.width,
                    height_m: e.height,
                    kind: e.kind,
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn signal(id: &str, center: [f64; 3], normal: [f64; 3]) -> MapElement {
        MapElement::new(
            id,
            Vector3::from(center),
            Vector3::from(normal).normalize(),
            1.0,
            2.0,
        )
        .unwrap()
    }

    fn toy_map(elements: Vec<MapElement>) -> HdMap {
        HdMap::new("toy", elements).unwrap()
    }

    #[test]
    fn roi_includes_facing_element_within_range() {
        let map = toy_map(vec![signal("a", [50.0, 0.0, 0.0], [-1.0, 0.0, 0.0])]);
        let hit = query_roi(
            &map,
            &Vector3::zeros(),
            &Vector3::new(1.0, 0.0, 0.0),
            &RoiConfig::default(),
        )
        .unwrap();
        assert_eq!(hit.len(), 1);
        assert_eq!(hit[0].id, "a");
    }

    #[test]
    fn roi_excludes_element_beyond_distance_threshold() {
        let map = toy_map(vec![signal("a", [150.0, 0.0, 0.0], [-1.0, 0.0, 0.0])]);
        let hit = query_roi(
            &map,
            &Vector3::zeros(),
            &Vector3::new(1.0, 0.0, 0.0),
            &RoiConfig::default(),
        )
        .unwrap();
        assert!(hit.is_empty());
    }

    #[test]
    fn roi_excludes_element_facing_away() {
        let map = toy_map(vec![signal("a", [50.0, 0.0, 0.0], [1.0, 0.0, 0.0])]);
        let hit = query_roi(
            &map,
            &Vector3::zeros(),
            &Vector3::new(1.0, 0.0, 0.0),
            &RoiConfig::default(),
        )
        .unwrap();
        assert!(hit.is_empty());
    }

    #[test]
    fn roi_rejects_non_unit_forward() {
        let map = toy_map(vec![]);
        let err = query_roi(
            &map,
            &Vector3::zeros(),
            &Vector3::new(2.0, 0.0, 0.0),
            &RoiConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn roi_result_order_stable_by_id() {
        let map = toy_map(vec![
            signal("b", [40.0, 2.0, 0.0], [-1.0, 0.0, 0.0]),
            signal("a", [50.0, -2.0, 0.0], [-1.0, 0.0, 0.0]),
        ]);
        let hit = query_roi(
            &map,
            &Vector3::zeros(),
            &Vector3::new(1.0, 0.0, 0.0),
            &RoiConfig::default(),
        )
        .unwrap();
        let ids: Vec<&str> = hit.iter().map(|e| e.id.as_str()).collect();
        assert_eq!(ids, vec!["a", "b"]);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let res = HdMap::new(
            "dup",
            vec![
                signal("x", [1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]),
                signal("x", [2.0, 0.0, 0.0], [-1.0, 0.0, 0.0]),
            ],
        );
        assert!(res.is_err());
    }

    #[test]
    fn map_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("map.json");
        let map = toy_map(vec![signal("s1", [30.0, -1.5, 4.0], [-1.0, 0.0, 0.0])]);
        map.save(&path).unwrap();
        let loaded = HdMap::load(&path).unwrap();
        assert_eq!(loaded.map_id, "toy");
        assert_eq!(loaded.elements.len(), 1);
        assert_eq!(loaded.elements[0].id, "s1");
        assert!((loaded.elements[0].center - map.elements[0].center).norm() < 1e-12);
    }

    #[test]
    fn map_file_rejects_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        std::fs::write(&path, r#"{"map_id":"m","elements":[],"extra":1}"#).unwrap();
        assert!(matches!(HdMap::load(&path), Err(Error::Schema(_))));
    }
}
