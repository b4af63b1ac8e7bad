//! Full network: multi-scale feature extractor, edge guidance branch,
//! transformer aggregation and decoder.
//!
//! Stride table (input `H x W`):
//!
//! | tensor | stride | width |
//! |--------|--------|-------|
//! | D1 | 2 | stem |
//! | D2, D3, D4 | 4, 8, 16 | last three stage widths |
//! | D5 | 16 | `ext_width` |
//! | E1, E2 | 2 | D1 |
//! | E3, E4, E5 | 4, 8, 16 | D2, D3, D4 |
//! | E6, F_a | 16 | `ext_width` |
//! | F_c | 2 | `fc_width` |
//! | depth | 1 | 1 |
//! | edge logits | 2 | 1 |

mod config;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{parse_kv, ModelConfig, StageSpec, MODEL_KEYS};

use crate::attention::Trfa;
use crate::data::sobel;
use crate::error::{ensure, Error, Result};
use crate::nn::{
    Caff, Conv2d, ConvBnRelu, ConvBnReluParams, DecoderBlock, EdgeCompact, EdgeHead, EntryKind, InvertedResidual,
    IrbConfig, Mode, ParamStore,
};
pub(crate) use config::{parse, parse_list};
use crate::tensor::{bilinear_resize, upsample2, ConvOptions, Scalar, Tensor};

/// Backbone outputs D1..D5.
#[derive(Debug, Clone)]
pub struct FeaturePyramid<T: Scalar> {
    pub d: [Tensor<T>; 5],
}

/// Edge branch outputs E1..E6 and the high-resolution feature F_c.
#[derive(Debug, Clone)]
pub struct EdgeFeatures<T: Scalar> {
    pub e: [Tensor<T>; 6],
    pub fc: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct ModelOutput<T: Scalar> {
    /// Linear depth prediction, (N, 1, H, W).
    pub depth: Tensor<T>,
    /// Edge logits, (N, 1, H/2, W/2).
    pub edge_logits: Tensor<T>,
}

/// Every intermediate of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace<T: Scalar> {
    pub pyramid: FeaturePyramid<T>,
    pub edges: EdgeFeatures<T>,
    pub fa: Tensor<T>,
    pub output: ModelOutput<T>,
}

struct Msfe {
    stem: ConvBnRelu,
    stages: Vec<Vec<InvertedResidual>>,
    widen: ConvBnRelu,
    extension: Vec<InvertedResidual>,
}

struct Egb {
    compact: EdgeCompact,
    fusions: Vec<Caff>,
    downs: Vec<ConvBnRelu>,
    to_e6: ConvBnRelu,
    to_fc: ConvBnRelu,
}

struct Decoder {
    entry: ConvBnRelu,
    blocks: Vec<DecoderBlock>,
    head: Conv2d,
}

pub struct EgdNet<T: Scalar> {
    pub cfg: ModelConfig,
    pub vs: ParamStore<T>,
    msfe: Msfe,
    egb: Egb,
    trfa: Trfa,
    decoder: Decoder,
    edge_head: EdgeHead,
}

impl<T: Scalar> EgdNet<T> {
    /// Builds the network with Kaiming fan-in initialized convolutions, unit
    /// BN scales and zero shifts.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let mut vs = ParamStore::new();
        let vs_ = &mut vs;
        let [w1, w2, w3, w4] = cfg.pyramid_widths();

        let stem = ConvBnRelu::new(vs_, "msfe.stem", ConvBnReluParams::new(3, cfg.stem_width, 3).stride(2), rng);
        let mut stages = Vec::new();
        let mut in_ch = cfg.stem_width;
        for (si, st) in cfg.stages.iter().enumerate() {
            let mut blocks = Vec::new();
            for r in 0..st.repeats {
                let irb = IrbConfig {
                    in_ch,
                    out_ch: st.out_ch,
                    expansion: st.expansion,
                    stride: if r == 0 { st.stride } else { 1 },
                    dilation: 1,
                };
                blocks.push(InvertedResidual::new(vs_, &format!("msfe.stage{}.{r}", si + 1), irb, rng));
                in_ch = st.out_ch;
            }
            stages.push(blocks);
        }
        let widen = ConvBnRelu::new(vs_, "msfe.widen", ConvBnReluParams::new(w4, cfg.ext_width, 1), rng);
        let extension = cfg
            .ext_dilations
            .iter()
            .enumerate()
            .map(|(i, &d)| {
                let irb = IrbConfig {
                    in_ch: cfg.ext_width,
                    out_ch: cfg.ext_width,
                    expansion: cfg.ext_expansion,
                    stride: 1,
                    dilation: d,
                };
                InvertedResidual::new(vs_, &format!("msfe.ext{i}"), irb, rng)
            })
            .collect();
        let msfe = Msfe {
            stem,
            stages,
            widen,
            extension,
        };

        let widths = [w1, w2, w3, w4];
        let compact = EdgeCompact::new(vs_, "egb.compact", w1, rng);
        let mut fusions = Vec::new();
        let mut downs = Vec::new();
        for (i, &w) in widths.iter().enumerate() {
            fusions.push(Caff::new(vs_, &format!("egb.caff{}", i + 1), w, rng));
            if i + 1 < widths.len() {
                downs.push(ConvBnRelu::new(
                    vs_,
                    &format!("egb.down{}", i + 1),
                    ConvBnReluParams::new(w, widths[i + 1], 3).stride(2),
                    rng,
                ));
            }
        }
        let to_e6 = ConvBnRelu::new(vs_, "egb.to_e6", ConvBnReluParams::new(w4, cfg.ext_width, 3), rng);
        let to_fc = ConvBnRelu::new(
            vs_,
            "egb.to_fc",
            ConvBnReluParams::new(w1 + w2 + w3 + w4, cfg.fc_width, 3),
            rng,
        );
        let egb = Egb {
            compact,
            fusions,
            downs,
            to_e6,
            to_fc,
        };

        let trfa = Trfa::new(vs_, "trfa", cfg.attention, rng)?;

        let [dw0, dw1, dw2, dw3] = cfg.decoder_widths;
        let decoder = Decoder {
            entry: ConvBnRelu::new(vs_, "decoder.entry", ConvBnReluParams::new(cfg.ext_width, dw0, 3), rng),
            blocks: vec![
                DecoderBlock::new(vs_, "decoder.block1", dw0 + w3, dw1, rng),
                DecoderBlock::new(vs_, "decoder.block2", dw1 + w2, dw2, rng),
                DecoderBlock::new(vs_, "decoder.block3", dw2 + w1 + cfg.fc_width, dw3, rng),
            ],
            head: Conv2d::new(vs_, "decoder.head", dw3, 1, 3, ConvOptions::default().padding(1), true, rng),
        };
        let edge_head = EdgeHead::new(vs_, "edge_head", cfg.fc_width, rng);

        Ok(EgdNet {
            cfg,
            vs,
            msfe,
            egb,
            trfa,
            decoder,
            edge_head,
        })
    }

    /// Same architecture in another precision, with every value copied over.
    pub fn cast<U: Scalar>(&self) -> Result<EgdNet<U>> {
        let mut out = EgdNet::<U>::new(self.cfg.clone(), 0)?;
        out.vs = self.vs.cast();
        Ok(out)
    }

    pub fn count_params(&self) -> usize {
        self.vs.count_params()
    }

    fn check_input(&self, rgb: &Tensor<T>) -> Result<()> {
        ensure!(
            rgb.dims() == 4 && rgb.shape()[1] == 3,
            "egdnet: expected (N,3,H,W) input, got {:?}",
            rgb.shape()
        );
        let (h, w) = (rgb.shape()[2], rgb.shape()[3]);
        ensure!(
            h % 16 == 0 && w % 16 == 0 && h > 0 && w > 0,
            "egdnet: input {w}x{h} is not divisible by 16"
        );
        Ok(())
    }

    pub fn msfe_forward(&self, rgb: &Tensor<T>, mode: Mode) -> Result<FeaturePyramid<T>> {
        self.check_input(rgb)?;
        let vs = &self.vs;
        let d1 = self.msfe.stem.forward(vs, rgb, mode)?;
        let mut x = d1.clone();
        let mut taps = Vec::new();
        for blocks in &self.msfe.stages {
            for b in blocks {
                x = b.forward(vs, &x, mode)?;
            }
            taps.push(x.clone());
        }
        let n = taps.len();
        let (d2, d3, d4) = (taps[n - 3].clone(), taps[n - 2].clone(), taps[n - 1].clone());
        let mut d5 = self.msfe.widen.forward(vs, &d4, mode)?;
        for b in &self.msfe.extension {
            d5 = b.forward(vs, &d5, mode)?;
        }
        Ok(FeaturePyramid {
            d: [d1, d2, d3, d4, d5],
        })
    }

    /// `grads` are the (N, 2, H, W) Sobel responses; `pyramid` supplies D1..D4.
    pub fn egb_forward(&self, grads: &Tensor<T>, pyramid: &FeaturePyramid<T>, mode: Mode) -> Result<EdgeFeatures<T>> {
        let vs = &self.vs;
        let e1 = self.egb.compact.forward(vs, grads, mode)?;
        let mut levels = Vec::with_capacity(4);
        let mut prev = e1.clone();
        for (i, fusion) in self.egb.fusions.iter().enumerate() {
            let edge_in = if i == 0 {
                prev.clone()
            } else {
                self.egb.downs[i - 1].forward(vs, &prev, mode)?
            };
            prev = fusion.forward(vs, &pyramid.d[i], &edge_in, mode)?;
            levels.push(prev.clone());
        }
        let e6 = self.egb.to_e6.forward(vs, &levels[3], mode)?;
        let (h2, w2) = (levels[0].shape()[2], levels[0].shape()[3]);
        let mut parts = vec![levels[0].clone()];
        for e in &levels[1..] {
            parts.push(bilinear_resize(e, h2, w2)?);
        }
        let fc = self.egb.to_fc.forward(vs, &Tensor::concat(&parts, 1)?, mode)?;
        let [e2, e3, e4, e5]: [Tensor<T>; 4] = levels.try_into().map_err(|_| Error::InvalidArgument("egb levels".into()))?;
        Ok(EdgeFeatures {
            e: [e1, e2, e3, e4, e5, e6],
            fc,
        })
    }

    pub fn decoder_forward(
        &self,
        fa: &Tensor<T>,
        fc: &Tensor<T>,
        pyramid: &FeaturePyramid<T>,
        mode: Mode,
    ) -> Result<Tensor<T>> {
        let vs = &self.vs;
        let [d1, d2, d3, _, _] = &pyramid.d;
        let x = self.decoder.entry.forward(vs, &upsample2(fa)?, mode)?;
        let x = self.decoder.blocks[0].forward(vs, &x, std::slice::from_ref(d3), mode)?;
        let x = self.decoder.blocks[1].forward(vs, &x, std::slice::from_ref(d2), mode)?;
        let x = self.decoder.blocks[2].forward(vs, &x, &[d1.clone(), fc.clone()], mode)?;
        self.decoder.head.forward(vs, &x)
    }

    pub fn forward_trace(&self, rgb: &Tensor<T>, mode: Mode) -> Result<ForwardTrace<T>> {
        let pyramid = self.msfe_forward(rgb, mode)?;
        let grads = sobel(rgb)?;
        let edges = self.egb_forward(&grads, &pyramid, mode)?;
        let fa = self.trfa.forward(&self.vs, &pyramid.d[4], &edges.e[5], mode)?;
        let depth = self.decoder_forward(&fa, &edges.fc, &pyramid, mode)?;
        let edge_logits = self.edge_head.forward(&self.vs, &edges.fc, mode)?;
        Ok(ForwardTrace {
            pyramid,
            edges,
            fa,
            output: ModelOutput { depth, edge_logits },
        })
    }

    pub fn forward(&self, rgb: &Tensor<T>, mode: Mode) -> Result<ModelOutput<T>> {
        Ok(self.forward_trace(rgb, mode)?.output)
    }

    /// Eval-mode depth clamped to the configured range.
    pub fn predict_depth(&self, rgb: &Tensor<T>) -> Result<Tensor<T>> {
        let out = self.forward(rgb, Mode::Eval)?;
        Ok(out.depth.detach().clamp(self.cfg.depth_min, self.cfg.depth_max))
    }

    /// Names and shapes of every stored tensor, in store order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>, EntryKind)> {
        self.vs
            .ids()
            .map(|id| (self.vs.name(id).to_string(), self.vs.get(id).shape().to_vec(), self.vs.kind(id)))
            .collect()
    }
}
