use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::augment::image::CHANNELS;
use crate::augment::Image;
use crate::error::{Error, Result};
use crate::numeric::checkpoint::{self, Metadata};
use crate::numeric::{Graph, ParamId, ParamSet, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    /// Output channels of the conv-relu-maxpool blocks.
    pub channels: Vec<usize>,
    pub kernel: usize,
    /// Input side length; must be divisible by `2^blocks`.
    pub image_side: usize,
    pub proj_hidden: usize,
    pub out_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            channels: vec![16, 32, 64, 64],
            kernel: 3,
            image_side: 32,
            proj_hidden: 64,
            out_dim: 64,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let blocks = self.channels.len();
        if blocks == 0 || self.channels.contains(&0) {
            return Err(Error::Config("encoder needs at least one non-empty block".into()));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config("encoder kernel must be odd".into()));
        }
        if self.image_side == 0 || self.image_side % (1 << blocks) != 0 {
            return Err(Error::Config(format!(
                "image side {} not divisible by 2^{blocks}",
                self.image_side
            )));
        }
        if self.proj_hidden == 0 || self.out_dim == 0 {
            return Err(Error::Config("projection sizes must be positive".into()));
        }
        Ok(())
    }

    /// Width of the flattened backbone output.
    pub fn feature_dim(&self) -> usize {
        let side = self.image_side >> self.channels.len();
        self.channels.last().copied().unwrap_or(0) * side * side
    }
}

#[derive(Debug, Clone)]
struct Block {
    w: ParamId,
    b: ParamId,
}

/// Conv backbone followed by a two-layer projection head.
#[derive(Debug, Clone)]
pub struct Encoder {
    cfg: EncoderConfig,
    params: ParamSet,
    blocks: Vec<Block>,
    proj: [ParamId; 4],
}

fn he(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        std * z
    })
}

const INPUT_SHIFT: f64 = 0.5;

/// Planar `[n, 3, h, w]` floats in [0, 1].
pub fn images_to_nchw(images: &[Image], side: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(images.len() * CHANNELS * side * side);
    for img in images {
        if img.width() != side || img.height() != side {
            return Err(Error::InvalidShape {
                op: "encode",
                shape: vec![img.height(), img.width()],
                reason: "image size differs from the encoder input size",
            });
        }
        img.extend_chw(&mut out);
    }
    Ok(out)
}

/// Graph outputs of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct EncoderOutput {
    /// `[n, feature_dim]` backbone features.
    pub features: Var,
    /// `[n, out_dim]` projected embeddings.
    pub embeddings: Var,
}

impl Encoder {
    pub fn new(cfg: EncoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut blocks = Vec::new();
        let mut c_in = CHANNELS;
        let k = cfg.kernel;
        for (i, &c_out) in cfg.channels.iter().enumerate() {
            let w = params.add(format!("encoder.conv{i}.w"), he(&[c_out, c_in, k, k], c_in * k * k, &mut rng));
            let b = params.add(format!("encoder.conv{i}.b"), Tensor::zeros(&[c_out]));
            blocks.push(Block { w, b });
            c_in = c_out;
        }
        let f = cfg.feature_dim();
        let w1 = params.add("encoder.proj1.w", he(&[f, cfg.proj_hidden], f, &mut rng));
        let b1 = params.add("encoder.proj1.b", Tensor::zeros(&[cfg.proj_hidden]));
        let w2 = params.add(
            "encoder.proj2.w",
            he(&[cfg.proj_hidden, cfg.out_dim], cfg.proj_hidden, &mut rng),
        );
        let b2 = params.add("encoder.proj2.b", Tensor::zeros(&[cfg.out_dim]));
        Ok(Self {
            cfg,
            params,
            blocks,
            proj: [w1, b1, w2, b2],
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn feature_dim(&self) -> usize {
        self.cfg.feature_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.cfg.out_dim
    }

    /// Backbone features only.
    pub fn backbone(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mut h = x;
        let pad = self.cfg.kernel / 2;
        for blk in &self.blocks {
            let w = g.param(&self.params, blk.w);
            let b = g.param(&self.params, blk.b);
            h = g.conv2d(h, w, b, pad)?;
            h = g.relu(h);
            h = g.max_pool2(h)?;
        }
        let n = g.shape(h)[0];
        g.reshape(h, &[n, self.feature_dim()])
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<EncoderOutput> {
        let features = self.backbone(g, x)?;
        let [w1, b1, w2, b2] = self.proj.map(|id| g.param(&self.params, id));
        let h = g.matmul(features, w1)?;
        let h = g.add(h, b1)?;
        let h = g.relu(h);
        let z = g.matmul(h, w2)?;
        let embeddings = g.add(z, b2)?;
        Ok(EncoderOutput {
            features,
            embeddings,
        })
    }

    /// Input node for a batch of images: pixels scaled to [0, 1], then
    /// shifted by −0.5 so a uniform image never maps to an all-zero input.
    pub fn input(&self, g: &mut Graph, images: &[Image]) -> Result<Var> {
        let side = self.cfg.image_side;
        let mut data = images_to_nchw(images, side)?;
        data.iter_mut().for_each(|v| *v -= INPUT_SHIFT);
        Ok(g.constant_raw(vec![images.len(), CHANNELS, side, side], data))
    }

    /// Inference-mode `(features, embeddings)` as row-major buffers.
    pub fn encode(&self, images: &[Image]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut g = Graph::inference();
        let x = self.input(&mut g, images)?;
        let out = self.forward(&mut g, x)?;
        Ok((g.value(out.features).to_vec(), g.value(out.embeddings).to_vec()))
    }

    /// Inference-mode backbone features, `[n, feature_dim]` row-major.
    pub fn features(&self, images: &[Image]) -> Result<Vec<f64>> {
        let mut g = Graph::inference();
        let x = self.input(&mut g, images)?;
        let f = self.backbone(&mut g, x)?;
        Ok(g.value(f).to_vec())
    }

    pub fn save(&self, path: &Path, extra: &Metadata) -> Result<()> {
        let mut meta = extra.clone();
        meta.insert("kind".into(), "encoder".into());
        meta.insert("encoder_config".into(), serde_json::to_string(&self.cfg)?);
        checkpoint::save(path, &self.params, &meta)
    }

    pub fn load(path: &Path) -> Result<(Self, Metadata)> {
        let (params, meta) = checkpoint::load(path)?;
        if meta.get("kind").map(String::as_str) != Some("encoder") {
            return Err(Error::Checkpoint(format!("{} is not an encoder checkpoint", path.display())));
        }
        let cfg: EncoderConfig = serde_json::from_str(
            meta.get("encoder_config")
                .ok_or_else(|| Error::Checkpoint("missing encoder_config".into()))?,
        )?;
        let mut enc = Self::new(cfg, 0)?;
        if !enc.params.same_layout(&params) {
            return Err(Error::Checkpoint("encoder parameters do not match config".into()));
        }
        enc.params = params;
        Ok((enc, meta))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contrastive::info_nce_stacked;
    use crate::numeric::{finite_diff_check, FdConfig};
    use rand::Rng;

    fn random_image(side: usize, rng: &mut ChaCha8Rng) -> Image {
        Image::new(side, side, (0..side * side * 3).map(|_| rng.random()).collect()).unwrap()
    }

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            channels: vec![3, 4],
            kernel: 3,
            image_side: 8,
            proj_hidden: 6,
            out_dim: 5,
        }
    }

    #[test]
    fn shapes_and_determinism() {
        let enc = Encoder::new(EncoderConfig::default(), 0).unwrap();
        assert_eq!(enc.feature_dim(), 256);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = random_image(32, &mut rng);
        for n in [1, 3] {
            let imgs = vec![img.clone(); n];
            let (f, z) = enc.encode(&imgs).unwrap();
            assert_eq!(f.len(), n * 256);
            assert_eq!(z.len(), n * 64);
            assert!(z.iter().all(|v| v.is_finite()));
            assert_eq!(z[..64], z[(n - 1) * 64..]);
        }
        let bad = random_image(16, &mut rng);
        assert!(enc.encode(&[bad]).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = EncoderConfig::default();
        c.image_side = 24;
        assert!(c.validate().is_err());
        c.image_side = 32;
        c.kernel = 2;
        assert!(c.validate().is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.ckpt");
        let enc = Encoder::new(tiny(), 3).unwrap();
        enc.save(&path, &Metadata::new()).unwrap();
        let (back, meta) = Encoder::load(&path).unwrap();
        assert_eq!(meta["kind"], "encoder");
        assert_eq!(back.params().checksum(), enc.params().checksum());
    }

    #[test]
    fn info_nce_gradient_matches_finite_differences() {
        for seed in 0..3 {
            let mut enc = Encoder::new(tiny(), seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 50);
            let imgs: Vec<Image> = (0..4).map(|_| random_image(8, &mut rng)).collect();
            let objective = |enc: &Encoder, g: &mut Graph| {
                let x = enc.input(g, &imgs).unwrap();
                let out = enc.forward(g, x).unwrap();
                info_nce_stacked(g, out.embeddings, 2, 0.5).unwrap()
            };
            let mut g = Graph::new();
            let loss = objective(&enc, &mut g);
            g.backward(loss).unwrap();
            let mut params = enc.params().clone();
            g.write_param_grads(&mut params);
            let template = enc.clone();
            let report = finite_diff_check(
                &mut params,
                |p| {
                    let mut probe = template.clone();
                    *probe.params_mut() = p.clone();
                    let mut g = Graph::inference();
                    let l = objective(&probe, &mut g);
                    g.scalar(l)
                },
                FdConfig {
                    max_coords: Some(60),
                    seed,
                    ..FdConfig::default()
                },
            );
            assert!(report.passed, "seed {seed}: {:?}", report.worst());
            enc.params_mut().zero_grads();
        }
    }
}
