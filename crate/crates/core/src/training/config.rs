//! Training configuration, curriculum and batch sampling.

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::scene::{SceneFamily, SceneSpec, SyntheticScene};
use crate::error::{Error, Result};
use crate::geometry::{average_reference_camera, make_depth_planes, plane_homography, DepthPlanes, PinholeCamera};
use crate::metrics::SsimParams;
use crate::neural::AdamHyper;
use crate::real::Real;
use crate::tensor::Image;
use crate::warp::ImageStack;

/// Depths that may be `+inf`; JSON has no infinity, so it is written as the
/// string `"inf"`.
pub mod serde_depth {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(z: &f64, s: S) -> Result<S::Ok, S::Error> {
        if z.is_infinite() && *z > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*z)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(v),
            Raw::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Raw::Text(t) => Err(de::Error::custom(format!("expected a depth or \"inf\", got {t:?}"))),
        }
    }
}

/// Iteration at which each refinement count starts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Curriculum {
    /// `(first_iteration, k)` pairs in increasing iteration order.
    pub stages: Vec<(usize, usize)>,
}

impl Curriculum {
    /// 2 refinement steps, then 3 at 10% and 4 at 20% of the run.
    pub fn scaled(total_iterations: usize) -> Self {
        Self {
            stages: vec![(0, 2), (total_iterations / 10, 3), (total_iterations / 5, 4)],
        }
    }

    pub fn constant(k: usize) -> Self {
        Self { stages: vec![(0, k)] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.first().map(|s| s.0) != Some(0) {
            return Err(Error::Config("curriculum must start at iteration 0".into()));
        }
        for pair in self.stages.windows(2) {
            if pair[1].0 < pair[0].0 || pair[1].1 < pair[0].1 {
                return Err(Error::Config("curriculum iterations and K values must not decrease".into()));
            }
        }
        if self.stages.iter().any(|s| s.1 == 0) {
            return Err(Error::Config("curriculum K values must be positive".into()));
        }
        Ok(())
    }

    pub fn k_at(&self, iteration: usize) -> usize {
        self.stages
            .iter()
            .take_while(|s| s.0 <= iteration)
            .last()
            .map_or(1, |s| s.1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub total_iterations: usize,
    pub curriculum: Curriculum,
    /// Inclusive range for the number of input views.
    pub n_views_range: [usize; 2],
    /// Inclusive range for the number of planes; draws snap down to a multiple of 4.
    pub d_planes_range: [usize; 2],
    #[serde(with = "serde_depth")]
    pub z_far: f64,
    pub z_near: f64,
    pub seed: u64,
    pub adam: AdamHyper,
    pub scene: SceneSpec,
    /// Fixed pool of this many scenes, or a fresh scene every step when `None`.
    pub pool_size: Option<usize>,
    /// Permutation-invariant sorted reductions everywhere.
    pub deterministic: bool,
    /// Gray level the rendered targets are composited over.
    pub background: f64,
    pub ssim: SsimParams,
}

impl TrainConfig {
    /// Toy-scale defaults at `size x size` pixels.
    pub fn toy(total_iterations: usize, size: usize, seed: u64) -> Self {
        Self {
            total_iterations,
            curriculum: Curriculum::scaled(total_iterations),
            n_views_range: [2, 5],
            d_planes_range: [8, 16],
            z_far: f64::INFINITY,
            z_near: 1.5,
            seed,
            adam: AdamHyper::default(),
            scene: SceneSpec::two_plane(size, size),
            pool_size: None,
            deterministic: true,
            background: 0.5,
            ssim: SsimParams::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.curriculum.validate()?;
        self.scene.validate().map_err(|e| Error::Config(e.to_string()))?;
        let [n_lo, n_hi] = self.n_views_range;
        if n_lo == 0 || n_lo > n_hi || n_hi >= 9 {
            return Err(Error::Config(format!(
                "input view range [{n_lo}, {n_hi}] must lie in [1, 8] so that targets remain"
            )));
        }
        let [d_lo, d_hi] = self.d_planes_range;
        if d_lo > d_hi || d_hi / 4 * 4 < d_lo.max(4) {
            return Err(Error::Config(format!(
                "plane range [{d_lo}, {d_hi}] contains no multiple of 4 that is at least 4"
            )));
        }
        if !(self.z_near > 0.0) || !(self.z_far > self.z_near) {
            return Err(Error::Config("need 0 < z_near < z_far".into()));
        }
        if self.scene.z_near < self.z_near {
            return Err(Error::Config("scene layers may not come closer than z_near".into()));
        }
        if self.pool_size == Some(0) {
            return Err(Error::Config("scene pool must not be empty".into()));
        }
        if !(0.0..=1.0).contains(&self.background) {
            return Err(Error::Config("background must lie in [0, 1]".into()));
        }
        if self.scene.width % 4 != 0 || self.scene.height % 4 != 0 {
            return Err(Error::Config(format!(
                "image size {}x{} must be divisible by 4",
                self.scene.width, self.scene.height
            )));
        }
        if self.scene.family == SceneFamily::TwoPlane && self.scene.layers != 2 {
            return Err(Error::Config("two-plane scenes have exactly 2 layers".into()));
        }
        Ok(())
    }
}

/// One training instance: input views, held-out targets and the planes.
#[derive(Debug, Clone)]
pub struct Batch<R> {
    pub scene_seed: u64,
    pub inputs: ImageStack<R>,
    pub targets: Vec<(PinholeCamera, Image<R>)>,
    pub planes: DepthPlanes,
}

impl<R: Real> Batch<R> {
    /// Splits a rig render into the named input views and all other views.
    pub fn from_scene(scene: &SyntheticScene, inputs: &[usize], planes: DepthPlanes) -> Result<Self> {
        let render = |cam: &PinholeCamera| scene.render(cam).cast::<R>();
        let cams: Vec<PinholeCamera> = inputs.iter().map(|&i| scene.rig[i].clone()).collect();
        let images = cams.iter().map(render).collect();
        let targets = (0..scene.rig.len())
            .filter(|i| !inputs.contains(i))
            .map(|i| (scene.rig[i].clone(), render(&scene.rig[i])))
            .collect();
        Ok(Self {
            scene_seed: scene.seed,
            inputs: ImageStack::new(images, cams)?,
            targets,
            planes,
        })
    }

    pub fn input_names(&self) -> Vec<String> {
        self.inputs.cameras.iter().map(|c| c.name.clone()).collect()
    }
}

/// Largest pixel shift between adjacent planes over the image corners of
/// every input view.
pub fn max_plane_displacement(reference: &PinholeCamera, views: &[PinholeCamera], planes: &DepthPlanes) -> Result<f64> {
    let (w, h) = ((reference.width - 1) as f64, (reference.height - 1) as f64);
    let corners = [(0.0, 0.0), (w, 0.0), (0.0, h), (w, h)];
    let mut worst: f64 = 0.0;
    for view in views {
        let maps = planes
            .disparities()
            .iter()
            .map(|&d| plane_homography(reference, view, d))
            .collect::<Result<Vec<_>>>()?;
        for pair in maps.windows(2) {
            for &(u, v) in &corners {
                if let (Some(a), Some(b)) = (pair[0].map(u, v), pair[1].map(u, v)) {
                    worst = worst.max((a.0 - b.0).hypot(a.1 - b.1));
                }
            }
        }
    }
    Ok(worst)
}

/// Fails with the smallest admissible plane count when adjacent planes are
/// more than one pixel apart in some input view.
pub fn check_plane_spacing(reference: &PinholeCamera, views: &[PinholeCamera], z_far: f64, z_near: f64, d: usize) -> Result<()> {
    let planes = make_depth_planes(d, z_far, z_near)?;
    if max_plane_displacement(reference, views, &planes)? <= 1.0 + 1e-9 {
        return Ok(());
    }
    let mut needed = d + 1;
    while needed < 1 << 16 {
        let planes = make_depth_planes(needed, z_far, z_near)?;
        if max_plane_displacement(reference, views, &planes)? <= 1.0 + 1e-9 {
            break;
        }
        needed += 1;
    }
    Err(Error::Config(format!(
        "{d} planes leave more than one pixel between adjacent planes; at least {needed} are required"
    )))
}

/// Draws the input views and plane count for one step.
pub fn sample_batch<R: Real>(rng: &mut ChaCha8Rng, config: &TrainConfig, scene: &SyntheticScene) -> Result<Batch<R>> {
    let [n_lo, n_hi] = config.n_views_range;
    let n = rng.random_range(n_lo..=n_hi);
    let mut inputs = sample(rng, scene.rig.len(), n).into_vec();
    inputs.sort_unstable();
    let [d_lo, d_hi] = config.d_planes_range;
    let mut d = rng.random_range(d_lo..=d_hi) / 4 * 4;
    if d < d_lo.max(4) {
        d += 4;
    }
    let cams: Vec<PinholeCamera> = inputs.iter().map(|&i| scene.rig[i].clone()).collect();
    let reference = average_reference_camera(&cams)?;
    check_plane_spacing(&reference, &cams, config.z_far, config.z_near, d)?;
    let planes = make_depth_planes(d, config.z_far, config.z_near)?;
    Batch::from_scene(scene, &inputs, planes)
}
