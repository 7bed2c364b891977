//! wasm-bindgen bindings behind `www/index.html`: synthetic shapes with edge
//! labels, per-point descriptor heat, and noise/downsampling statistics.

use wasm_bindgen::prelude::*;

use edgeformer::cloud::{normalize_cloud, PointCloud};
use edgeformer::descriptor::normalized_descriptors;
use edgeformer::evalmetrics::{chamfer, hausdorff};
use edgeformer::groundtruth::{synth_shape_with_points, ShapeKind};
use edgeformer::perturb::{add_gaussian_noise, random_downsample, sampling_density};

fn js(e: edgeformer::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    D1,
    D2,
}

/// A labeled cloud shown on the page.
#[wasm_bindgen]
pub struct Scene {
    cloud: PointCloud,
}

/// Noise and downsampling outcome, with distances measured in the original
/// cloud's unit-radius frame.
#[wasm_bindgen]
pub struct Perturbation {
    scene: Option<Scene>,
    s_density: f64,
    chamfer: f64,
    hausdorff: f64,
}

impl Scene {
    pub fn synth(kind: &str, n: usize, seed: u64) -> edgeformer::Result<Scene> {
        let kind: ShapeKind = kind.parse()?;
        Ok(Scene {
            cloud: synth_shape_with_points(kind, n, seed)?.cloud,
        })
    }

    pub fn cloud(&self) -> &PointCloud {
        &self.cloud
    }

    /// Mean descriptor value over each point's neighbors.
    pub fn heat(&self, k: usize, branch: Branch) -> edgeformer::Result<Vec<f64>> {
        let d = normalized_descriptors(&self.cloud, k)?;
        Ok((0..d.n)
            .map(|i| {
                let row = match branch {
                    Branch::D1 => d.d1_row(i),
                    Branch::D2 => d.d2_row(i),
                };
                row.iter().sum::<f64>() / row.len() as f64
            })
            .collect())
    }

    pub fn perturbed(&self, noise: f64, ratio: f64, seed: u64) -> edgeformer::Result<Perturbation> {
        let density = sampling_density(&self.cloud, seed)?;
        let noisy = add_gaussian_noise(&self.cloud, noise, density.s_density, seed.wrapping_add(1))?;
        let (out, _) = random_downsample(&noisy, ratio, seed.wrapping_add(2))?;
        let (orig, t) = normalize_cloud(&self.cloud);
        let moved: Vec<_> = out.points().iter().map(|p| t.apply(*p)).collect();
        Ok(Perturbation {
            chamfer: chamfer(orig.points(), &moved)?,
            hausdorff: hausdorff(orig.points(), &moved)?,
            s_density: density.s_density,
            scene: Some(Scene { cloud: out }),
        })
    }
}

#[wasm_bindgen]
impl Scene {
    /// `kind` is cube, cylinder, fused_boxes, wedge or `wedge:<degrees>`.
    #[wasm_bindgen(constructor)]
    pub fn new(kind: &str, n: usize, seed: u32) -> Result<Scene, JsError> {
        Self::synth(kind, n, u64::from(seed)).map_err(js)
    }

    pub fn len(&self) -> usize {
        self.cloud.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cloud.is_empty()
    }

    /// Flat `x, y, z` triples in the unit-radius frame.
    pub fn positions(&self) -> Vec<f32> {
        let (c, _) = normalize_cloud(&self.cloud);
        c.points()
            .iter()
            .flat_map(|p| [p.x as f32, p.y as f32, p.z as f32])
            .collect()
    }

    /// One byte per point, 1 for edge points.
    pub fn labels(&self) -> Vec<u8> {
        match self.cloud.labels() {
            Some(l) => l.iter().map(|&b| u8::from(b)).collect(),
            None => vec![0; self.cloud.len()],
        }
    }

    #[wasm_bindgen(js_name = edgeCount)]
    pub fn edge_count(&self) -> usize {
        self.labels().iter().filter(|&&b| b == 1).count()
    }

    /// Per-point mean of the `d1` or `d2` descriptor row.
    #[wasm_bindgen(js_name = descriptorHeat)]
    pub fn descriptor_heat(&self, k: usize, branch: &str) -> Result<Vec<f32>, JsError> {
        let branch = match branch {
            "d1" => Branch::D1,
            "d2" => Branch::D2,
            other => return Err(JsError::new(&format!("unknown branch '{other}'"))),
        };
        let h = self.heat(k, branch).map_err(js)?;
        Ok(h.into_iter().map(|v| v as f32).collect())
    }

    /// Adds noise with std `noise * S_density` per axis, then keeps `ratio` of the points.
    pub fn perturb(&self, noise: f64, ratio: f64, seed: u32) -> Result<Perturbation, JsError> {
        self.perturbed(noise, ratio, u64::from(seed)).map_err(js)
    }
}

#[wasm_bindgen]
impl Perturbation {
    #[wasm_bindgen(getter, js_name = sDensity)]
    pub fn s_density(&self) -> f64 {
        self.s_density
    }

    #[wasm_bindgen(getter)]
    pub fn chamfer(&self) -> f64 {
        self.chamfer
    }

    #[wasm_bindgen(getter)]
    pub fn hausdorff(&self) -> f64 {
        self.hausdorff
    }

    /// Hands the perturbed cloud to the page once; the statistics stay readable.
    #[wasm_bindgen(js_name = takeScene)]
    pub fn take_scene(&mut self) -> Option<Scene> {
        self.scene.take()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synth_scene() {
        let s = Scene::synth("wedge:60", 800, 3).unwrap();
        assert_eq!(s.positions().len(), 3 * s.len());
        assert!(s.edge_count() > 0 && s.edge_count() < s.len());
        assert!(Scene::synth("torus", 800, 3).is_err());
    }

    #[test]
    fn heat_is_larger_on_edges() {
        let s = Scene::synth("cube", 1500, 1).unwrap();
        let labels = s.labels();
        for branch in [Branch::D1, Branch::D2] {
            let h = s.heat(20, branch).unwrap();
            let mean = |want: u8| {
                let v: Vec<f64> = h.iter().zip(&labels).filter(|p| *p.1 == want).map(|p| *p.0).collect();
                v.iter().sum::<f64>() / v.len() as f64
            };
            assert!(mean(1) > 3.0 * mean(0), "{branch:?}");
        }
    }

    #[test]
    fn perturbation_statistics() {
        let s = Scene::synth("cylinder", 1000, 2).unwrap();
        let same = s.perturbed(0.0, 1.0, 5).unwrap();
        assert_eq!(same.chamfer, 0.0);
        assert!(same.s_density > 0.0);
        let mut p = s.perturbed(0.5, 0.6, 5).unwrap();
        assert!(p.chamfer > 0.0);
        assert_eq!(p.take_scene().unwrap().len(), (0.6 * s.len() as f64).floor() as usize);
    }
}
