//! The training loop, its resumable state and held-out evaluation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{sample_batch, Batch, TrainConfig};
use super::scene::{generate_scene, SyntheticScene};
use super::step::{training_step, LossSettings};
use crate::error::{Error, Result};
use crate::geometry::make_depth_planes;
use crate::metrics::image_metrics;
use crate::neural::{init_params, AdamState, NetworkParams};
use crate::refiner::{run_refiner_with, RefinerConfig, RefinerContext};
use crate::render::{colorize_mpi, render_novel_view, Reduction};
use crate::warp::ImageStack;

const TRAIN_STREAM: u64 = 1;
const TEST_STREAM: u64 = 2;

/// One line of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iter: usize,
    pub loss: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub mae: f64,
    pub k: usize,
}

/// Position of a ChaCha8 stream, enough to resume it exactly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    /// 32-byte key as hex.
    pub seed: String,
    pub stream: u64,
    /// 128-bit word position as a decimal string.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || Error::Format("malformed RNG state".into());
        if self.seed.len() != 64 || !self.seed.is_ascii() {
            return Err(bad());
        }
        let mut key = [0u8; 32];
        for (i, b) in key.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let pos: u128 = self.word_pos.parse().map_err(|_| bad())?;
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

/// JSON sidecar of a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: TrainConfig,
    pub iteration: usize,
    pub adam_steps: u64,
    pub rng: RngState,
}

/// Scene seeds of the fixed training pool or of the test pool.
fn scene_seeds(seed: u64, stream: u64, count: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    (0..count).map(|_| rng.random()).collect()
}

/// Held-out scenes that never appear in training for `config.seed`.
pub fn test_pool(config: &TrainConfig, count: usize) -> Result<Vec<SyntheticScene>> {
    scene_seeds(config.seed, TEST_STREAM, count)
        .into_iter()
        .map(|s| generate_scene(s, &config.scene))
        .collect()
}

#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub params: NetworkParams<f32>,
    pub adam: AdamState<f32>,
    /// Number of completed steps.
    pub iteration: usize,
    rng: ChaCha8Rng,
    pool: Vec<SyntheticScene>,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let params = init_params::<f32>(config.seed);
        let adam = AdamState::new(&params, config.adam);
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Self::assemble(config, params, adam, 0, rng)
    }

    /// Rebuilds a trainer from checkpointed parts.
    pub fn resume(meta: &CheckpointMeta, params: NetworkParams<f32>, mut adam: AdamState<f32>) -> Result<Self> {
        meta.config.validate()?;
        adam.step_count = meta.adam_steps;
        adam.hyper = meta.config.adam;
        Self::assemble(meta.config.clone(), params, adam, meta.iteration, meta.rng.restore()?)
    }

    fn assemble(
        config: TrainConfig,
        params: NetworkParams<f32>,
        adam: AdamState<f32>,
        iteration: usize,
        rng: ChaCha8Rng,
    ) -> Result<Self> {
        params.validate()?;
        let pool = match config.pool_size {
            Some(n) => scene_seeds(config.seed, TRAIN_STREAM, n)
                .into_iter()
                .map(|s| generate_scene(s, &config.scene))
                .collect::<Result<_>>()?,
            None => Vec::new(),
        };
        Ok(Self {
            config,
            params,
            adam,
            iteration,
            rng,
            pool,
        })
    }

    /// Trains on `scenes` instead of the generated pool.
    pub fn use_scenes(&mut self, scenes: Vec<SyntheticScene>) -> Result<()> {
        if scenes.is_empty() {
            return Err(Error::Config("scene pool must not be empty".into()));
        }
        let size = (self.config.scene.width, self.config.scene.height);
        if let Some(s) = scenes.iter().find(|s| (s.spec.width, s.spec.height) != size) {
            return Err(Error::Config(format!(
                "scene {} is {}x{}, training runs at {}x{}",
                s.seed, s.spec.width, s.spec.height, size.0, size.1
            )));
        }
        self.pool = scenes;
        Ok(())
    }

    pub fn meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            config: self.config.clone(),
            iteration: self.iteration,
            adam_steps: self.adam.step_count,
            rng: RngState::capture(&self.rng),
        }
    }

    pub fn reduction(&self) -> Reduction {
        if self.config.deterministic {
            Reduction::Sorted
        } else {
            Reduction::Ordered
        }
    }

    pub fn loss_settings(&self, iterations: usize) -> LossSettings {
        LossSettings {
            iterations,
            reduction: self.reduction(),
            background: self.config.background,
            ssim: self.config.ssim,
        }
    }

    fn next_batch(&mut self) -> Result<Batch<f32>> {
        let scene = if self.pool.is_empty() {
            let seed = self.rng.random();
            generate_scene(seed, &self.config.scene)?
        } else {
            let i = self.rng.random_range(0..self.pool.len());
            self.pool[i].clone()
        };
        sample_batch(&mut self.rng, &self.config, &scene)
    }

    /// Samples a batch and takes one optimizer step.
    pub fn step(&mut self) -> Result<MetricsRecord> {
        let k = self.config.curriculum.k_at(self.iteration);
        let batch = self.next_batch()?;
        let settings = self.loss_settings(k);
        let stats = training_step(&mut self.params, &mut self.adam, &batch, &settings).map_err(|e| match e {
            Error::NonFinite(msg) => Error::NonFinite(format!(
                "{msg}; iteration {}, K {k}, scene seed {}, inputs {:?}, {} planes, adam step {}",
                self.iteration,
                batch.scene_seed,
                batch.input_names(),
                batch.planes.len(),
                self.adam.step_count
            )),
            other => other,
        })?;
        self.iteration += 1;
        Ok(MetricsRecord {
            iter: self.iteration,
            loss: stats.loss,
            psnr: stats.psnr,
            ssim: stats.ssim,
            mae: stats.mae,
            k,
        })
    }

    /// Steps until `total_iterations`, handing every record to `on_record`.
    pub fn run(&mut self, mut on_record: impl FnMut(&MetricsRecord) -> Result<()>) -> Result<()> {
        while self.iteration < self.config.total_iterations {
            let record = self.step()?;
            on_record(&record)?;
        }
        Ok(())
    }
}

/// Which views are fed to the refiner and which one is scored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalProtocol {
    pub inputs: Vec<String>,
    pub target: String,
    pub planes: usize,
    pub z_near: f64,
    pub background: f64,
}

impl EvalProtocol {
    /// Four corner views of the rig in, center view out.
    pub fn corners(planes: usize, z_near: f64) -> Self {
        Self {
            inputs: ["c00", "c02", "c20", "c22"].map(String::from).to_vec(),
            target: "c11".into(),
            planes,
            z_near,
            background: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub k: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub mae: f64,
}

/// Mean held-out metrics over `scenes` for every refinement count in `k_values`.
pub fn evaluate(
    params: &NetworkParams<f32>,
    scenes: &[SyntheticScene],
    k_values: &[usize],
    protocol: &EvalProtocol,
) -> Result<Vec<EvalRow>> {
    if scenes.is_empty() || k_values.is_empty() {
        return Err(Error::Config("evaluation needs scenes and K values".into()));
    }
    let k_max = *k_values.iter().max().expect("non-empty");
    let planes = make_depth_planes(protocol.planes, f64::INFINITY, protocol.z_near)?;
    let mut rows: Vec<EvalRow> = k_values
        .iter()
        .map(|&k| EvalRow {
            k,
            psnr: 0.0,
            ssim: 0.0,
            mae: 0.0,
        })
        .collect();
    let share = 1.0 / scenes.len() as f64;
    for scene in scenes {
        let find = |name: &str| {
            scene
                .camera(name)
                .cloned()
                .ok_or_else(|| Error::Config(format!("rig has no view {name:?}")))
        };
        let cams = protocol.inputs.iter().map(|n| find(n)).collect::<Result<Vec<_>>>()?;
        let target = find(&protocol.target)?;
        let images = cams.iter().map(|c| scene.render(c).cast::<f32>()).collect();
        let stack = ImageStack::new(images, cams)?;
        let ctx = RefinerContext::new(&stack, &planes)?;
        let truth = scene.render(&target).cast::<f32>();
        let config = RefinerConfig::new(k_max, planes.clone())?;
        let mut scored = Vec::new();
        run_refiner_with(&ctx, &config, params, |k, alpha| {
            if k_values.contains(&k) {
                scored.push((k, alpha.clone()));
            }
        })?;
        for (k, alpha) in scored {
            let mpi = colorize_mpi(&alpha, &ctx.psv)?;
            let bg = protocol.background as f32;
            let shown = render_novel_view(&mpi, &target)?.over_background([bg; 3]);
            let m = image_metrics(&shown, &truth)?.capped();
            for row in rows.iter_mut().filter(|r| r.k == k) {
                row.psnr += m.psnr * share;
                row.ssim += m.ssim * share;
                row.mae += m.mae * share;
            }
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config(iters: usize) -> TrainConfig {
        let mut c = TrainConfig::toy(iters, 16, 5);
        c.d_planes_range = [8, 8];
        c.n_views_range = [2, 3];
        c
    }

    #[test]
    fn rng_state_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let _: u64 = rng.random();
        let _: u32 = rng.random();
        let state = RngState::capture(&rng);
        let mut back = state.restore().unwrap();
        for _ in 0..10 {
            assert_eq!(rng.random::<u64>(), back.random::<u64>());
        }
        let bad = RngState {
            seed: "zz".into(),
            ..state
        };
        assert!(bad.restore().is_err());
    }

    #[test]
    fn curriculum_never_decreases_during_a_run() {
        let mut t = Trainer::new(tiny_config(10)).unwrap();
        let mut ks = Vec::new();
        t.run(|r| {
            ks.push(r.k);
            Ok(())
        })
        .unwrap();
        assert_eq!(ks.len(), 10);
        assert!(ks.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(ks[0], 2);
        assert_eq!(*ks.last().unwrap(), 4);
    }

    #[test]
    fn resume_continues_the_same_trajectory() {
        let mut straight = Trainer::new(tiny_config(4)).unwrap();
        straight.run(|_| Ok(())).unwrap();

        let mut first = Trainer::new(tiny_config(4)).unwrap();
        first.step().unwrap();
        first.step().unwrap();
        let meta: CheckpointMeta = serde_json::from_str(&serde_json::to_string(&first.meta()).unwrap()).unwrap();
        let mut resumed = Trainer::resume(&meta, first.params.clone(), first.adam.clone()).unwrap();
        resumed.run(|_| Ok(())).unwrap();
        assert_eq!(resumed.params, straight.params);
        assert_eq!(resumed.adam, straight.adam);
    }

    #[test]
    fn evaluation_has_one_row_per_k() {
        let config = tiny_config(1);
        let scenes = test_pool(&config, 2).unwrap();
        let params = init_params::<f32>(1);
        let rows = evaluate(&params, &scenes, &[1, 2, 3], &EvalProtocol::corners(8, 1.5)).unwrap();
        assert_eq!(rows.iter().map(|r| r.k).collect::<Vec<_>>(), vec![1, 2, 3]);
        for r in &rows {
            assert!(r.psnr.is_finite() && r.ssim <= 1.0 && r.mae >= 0.0);
        }
        assert!(evaluate(&params, &[], &[1], &EvalProtocol::corners(8, 1.5)).is_err());
    }

    #[test]
    fn test_pool_is_disjoint_from_training_pool() {
        let c = tiny_config(1);
        let train = scene_seeds(c.seed, TRAIN_STREAM, 50);
        let test = scene_seeds(c.seed, TEST_STREAM, 50);
        assert!(test.iter().all(|s| !train.contains(s)));
    }
}
