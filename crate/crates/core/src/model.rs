//! Dual-branch matching network.
//!
//! Both images go through the same shallow extractor (two stride-2 3x3
//! convolutions with relu, so features are at 1/4 resolution). Template
//! features are used directly as depthwise kernels over the search
//! features; the per-channel responses are fused by a 1x1 convolution into
//! `5 * 16` channels and pixel-shuffled back to full resolution, giving one
//! score map and four geometry maps.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::synth::{is_valid_size, DEFAULT_SIGMA_RATIO, DEFAULT_S_MAX};
use crate::tensornet::{
    conv2d, conv2d_backward, depthwise_corr, depthwise_corr_backward, pixel_shuffle,
    pixel_unshuffle, pointwise_conv, pointwise_conv_backward, read_weight_file, relu,
    relu_backward, sigmoid, tanh, write_weight_file, NamedTensor, ParamStore, Real, Tensor4,
    WeightFile,
};

/// Pixel-shuffle factor; equals the feature stride.
pub const UPSCALE: usize = 4;
/// Score, cos, sign, sx, sy.
pub const NUM_MAPS: usize = 5;
/// `logit(0.1)`.
const SCORE_PRIOR_LOGIT: f64 = -2.197_224_577_336_219_6;
const HEAD_CHANNELS: usize = NUM_MAPS * UPSCALE * UPSCALE;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Feature channels `C`.
    pub channels: usize,
    /// Channels of the first extractor layer.
    pub hidden: usize,
    pub s_max: f64,
    /// Heatmap sigma as a fraction of the template's shorter side.
    pub sigma_ratio: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 16,
            hidden: 8,
            s_max: DEFAULT_S_MAX,
            sigma_ratio: DEFAULT_SIGMA_RATIO,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels < 4 || self.hidden < 1 {
            return Err(Error::invalid(format!("model needs >= 4 channels, got {}", self.channels)));
        }
        if !(self.s_max > 0.0 && self.sigma_ratio > 0.0) {
            return Err(Error::invalid("s_max and sigma_ratio must be positive"));
        }
        Ok(())
    }
}

/// The five full-resolution prediction maps, row-major `height x width`.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputMaps<T = f32> {
    pub width: usize,
    pub height: usize,
    /// Sigmoid center score.
    pub score: Vec<T>,
    /// Tanh estimate of `cos(theta)`.
    pub cos: Vec<T>,
    /// Sigmoid probability that `theta >= 0`.
    pub sign: Vec<T>,
    /// Sigmoid scale estimates, normalized by `s_max`.
    pub sx: Vec<T>,
    pub sy: Vec<T>,
}

impl<T: Real> OutputMaps<T> {
    pub fn maps(&self) -> [&Vec<T>; NUM_MAPS] {
        [&self.score, &self.cos, &self.sign, &self.sx, &self.sy]
    }

    pub fn to_f32(&self) -> OutputMaps<f32> {
        let c = |v: &Vec<T>| v.iter().map(|x| x.as_f64() as f32).collect();
        OutputMaps {
            width: self.width,
            height: self.height,
            score: c(&self.score),
            cos: c(&self.cos),
            sign: c(&self.sign),
            sx: c(&self.sx),
            sy: c(&self.sy),
        }
    }
}

/// Gradients of a scalar loss with respect to each output map.
#[derive(Debug, Clone, PartialEq)]
pub struct MapGrads<T> {
    pub score: Vec<T>,
    pub cos: Vec<T>,
    pub sign: Vec<T>,
    pub sx: Vec<T>,
    pub sy: Vec<T>,
}

impl<T: Real> MapGrads<T> {
    pub fn zeros(n: usize) -> Self {
        MapGrads {
            score: vec![T::zero(); n],
            cos: vec![T::zero(); n],
            sign: vec![T::zero(); n],
            sx: vec![T::zero(); n],
            sy: vec![T::zero(); n],
        }
    }
}

struct ExtractCache<T> {
    x: Tensor4<T>,
    a1: Tensor4<T>,
    h1: Tensor4<T>,
    a2: Tensor4<T>,
}

/// Intermediates kept for the backward pass.
pub struct ForwardCache<T> {
    templ: ExtractCache<T>,
    search: ExtractCache<T>,
    ft: Tensor4<T>,
    fs: Tensor4<T>,
    corr_scale: T,
    corr: Tensor4<T>,
    fused: Tensor4<T>,
    padded: (usize, usize),
    outputs: OutputMaps<T>,
}

impl<T: Real> ForwardCache<T> {
    pub fn outputs(&self) -> &OutputMaps<T> {
        &self.outputs
    }

    /// Fused correlation response at feature resolution (after relu).
    pub fn response(&self) -> &Tensor4<T> {
        &self.fused
    }
}

/// Converts an image into a `[1, 3, H', W']` tensor, replicating gray
/// images to three channels and zero-padding to multiples of 4.
pub fn image_tensor<T: Real>(img: &Image) -> Tensor4<T> {
    let (w, h) = (img.width(), img.height());
    let (pw, ph) = (w.div_ceil(UPSCALE) * UPSCALE, h.div_ceil(UPSCALE) * UPSCALE);
    let mut t = Tensor4::zeros([1, 3, ph, pw]);
    let ch = img.channels();
    for c in 0..3 {
        let src_c = c.min(ch - 1);
        for y in 0..h {
            for x in 0..w {
                let i = t.idx(0, c, y, x);
                t.data_mut()[i] = T::of(img.get(x, y, src_c) as f64);
            }
        }
    }
    t
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T = f32> {
    config: ModelConfig,
    params: ParamStore<T>,
}

const EXT1_W: &str = "extract.conv1.weight";
const EXT1_B: &str = "extract.conv1.bias";
const EXT2_W: &str = "extract.conv2.weight";
const EXT2_B: &str = "extract.conv2.bias";
const HEAD_W: &str = "head.pointwise.weight";
const HEAD_B: &str = "head.pointwise.bias";

impl<T: Real> Model<T> {
    /// Seeded initialization: weights `U(+-sqrt(1 / (cin * k * k)))`,
    /// biases zero.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let (c, hid) = (config.channels, config.hidden);
        params.insert_uniform(EXT1_W, [hid, 3, 3, 3], (1.0 / 27.0f64).sqrt(), &mut rng);
        params.insert(EXT1_B, Tensor4::zeros([1, 1, 1, hid]));
        params.insert_uniform(EXT2_W, [c, hid, 3, 3], (1.0 / (hid * 9) as f64).sqrt(), &mut rng);
        params.insert(EXT2_B, Tensor4::zeros([1, 1, 1, c]));
        params.insert_uniform(HEAD_W, [HEAD_CHANNELS, c, 1, 1], (1.0 / c as f64).sqrt(), &mut rng);
        // Score logits start at a low foreground prior.
        let mut hb = Tensor4::zeros([1, 1, 1, HEAD_CHANNELS]);
        hb.data_mut()[..UPSCALE * UPSCALE].fill(T::of(SCORE_PRIOR_LOGIT));
        params.insert(HEAD_B, hb);
        Ok(Model { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        let mut params = ParamStore::new();
        for p in self.params.params() {
            params.insert(&p.name, p.value.cast());
        }
        Model {
            config: self.config,
            params,
        }
    }

    fn p(&self, name: &str) -> &Tensor4<T> {
        self.params.get(name).expect("model parameters are fixed at construction")
    }

    fn extract(&self, x: Tensor4<T>) -> Result<(Tensor4<T>, ExtractCache<T>)> {
        let [_, _, h, w] = x.shape();
        if h % UPSCALE != 0 || w % UPSCALE != 0 {
            return Err(Error::Shape(format!("extractor input {h}x{w} not a multiple of 4")));
        }
        let a1 = conv2d(&x, self.p(EXT1_W), self.p(EXT1_B).data(), 2, 1)?;
        let h1 = relu(&a1);
        let a2 = conv2d(&h1, self.p(EXT2_W), self.p(EXT2_B).data(), 2, 1)?;
        let f = relu(&a2);
        Ok((f, ExtractCache { x, a1, h1, a2 }))
    }

    /// `[1, C, H/4, W/4]` features of an image whose sides are multiples of 4.
    pub fn extract_features(&self, img: &Image) -> Result<Tensor4<T>> {
        if img.width() % UPSCALE != 0 || img.height() % UPSCALE != 0 {
            return Err(Error::Shape(format!(
                "image {}x{} not a multiple of 4",
                img.width(),
                img.height()
            )));
        }
        Ok(self.extract(image_tensor(img))?.0)
    }

    fn extract_backward(&mut self, cache: &ExtractCache<T>, df: &Tensor4<T>) -> Result<()> {
        let da2 = relu_backward(&cache.a2, df)?;
        let g2 = conv2d_backward(&cache.h1, self.p(EXT2_W), 2, 1, &da2)?;
        let dh1 = relu_backward(&cache.a1, &g2.dx)?;
        let g1 = conv2d_backward(&cache.x, self.p(EXT1_W), 2, 1, &dh1)?;
        self.params.accumulate_grad(EXT2_W, g2.dw.data())?;
        self.params.accumulate_grad(EXT2_B, &g2.db)?;
        self.params.accumulate_grad(EXT1_W, g1.dw.data())?;
        self.params.accumulate_grad(EXT1_B, &g1.db)?;
        Ok(())
    }

    /// Full forward pass, keeping what backward needs.
    pub fn forward_train(&self, template: &Image, search: &Image) -> Result<ForwardCache<T>> {
        let (tw, th) = (template.width(), template.height());
        if !is_valid_size(tw) || !is_valid_size(th) {
            return Err(Error::Shape(format!("template {tw}x{th} is not 8n+4 on both sides")));
        }
        let (sw, sh) = (search.width(), search.height());
        if tw > sw || th > sh {
            return Err(Error::Shape(format!(
                "template {tw}x{th} larger than search {sw}x{sh}"
            )));
        }
        let (ft, tcache) = self.extract(image_tensor(template))?;
        let (fs, scache) = self.extract(image_tensor(search))?;
        let [_, _, kh, kw] = ft.shape();
        let corr_scale = T::one() / T::of((kh * kw) as f64);
        let mut corr = depthwise_corr(&fs, &ft)?;
        corr.data_mut().iter_mut().for_each(|v| *v = *v * corr_scale);
        let fused = relu(&corr);
        let head = pointwise_conv(&fused, self.p(HEAD_W), self.p(HEAD_B).data())?;
        let logits = pixel_shuffle(&head, UPSCALE)?;
        let [_, _, ph, pw] = logits.shape();
        let crop = |m: usize| -> Vec<T> {
            let plane = logits.plane(0, m);
            (0..sh).flat_map(|y| plane[y * pw..y * pw + sw].iter().copied()).collect()
        };
        let act = |v: Vec<T>, f: fn(&Tensor4<T>) -> Tensor4<T>| {
            f(&Tensor4::from_vec([1, 1, sh, sw], v).expect("cropped map")).into_data()
        };
        let outputs = OutputMaps {
            width: sw,
            height: sh,
            score: act(crop(0), sigmoid),
            cos: act(crop(1), tanh),
            sign: act(crop(2), sigmoid),
            sx: act(crop(3), sigmoid),
            sy: act(crop(4), sigmoid),
        };
        Ok(ForwardCache {
            templ: tcache,
            search: scache,
            ft,
            fs,
            corr_scale,
            corr,
            fused,
            padded: (pw, ph),
            outputs,
        })
    }

    /// Inference.
    pub fn forward(&self, template: &Image, search: &Image) -> Result<OutputMaps<T>> {
        Ok(self.forward_train(template, search)?.outputs)
    }

    /// Accumulates parameter gradients for `grads` (dL / d output maps).
    pub fn backward(&mut self, cache: &ForwardCache<T>, grads: &MapGrads<T>) -> Result<()> {
        let out = &cache.outputs;
        let (sw, sh) = (out.width, out.height);
        let (pw, ph) = cache.padded;
        let n = sw * sh;
        let mut dlogits = Tensor4::zeros([1, NUM_MAPS, ph, pw]);
        let per_map: [(&Vec<T>, &Vec<T>, bool); NUM_MAPS] = [
            (&out.score, &grads.score, true),
            (&out.cos, &grads.cos, false),
            (&out.sign, &grads.sign, true),
            (&out.sx, &grads.sx, true),
            (&out.sy, &grads.sy, true),
        ];
        for (m, (y, g, is_sigmoid)) in per_map.into_iter().enumerate() {
            if y.len() != n || g.len() != n {
                return Err(Error::Shape("map gradient size mismatch".into()));
            }
            for yy in 0..sh {
                for xx in 0..sw {
                    let i = yy * sw + xx;
                    let d = if is_sigmoid {
                        g[i] * y[i] * (T::one() - y[i])
                    } else {
                        g[i] * (T::one() - y[i] * y[i])
                    };
                    let j = dlogits.idx(0, m, yy, xx);
                    dlogits.data_mut()[j] = d;
                }
            }
        }
        let dhead = pixel_unshuffle(&dlogits, UPSCALE)?;
        let gh = pointwise_conv_backward(&cache.fused, self.p(HEAD_W), &dhead)?;
        self.params.accumulate_grad(HEAD_W, gh.dw.data())?;
        self.params.accumulate_grad(HEAD_B, &gh.db)?;
        let mut dcorr = relu_backward(&cache.corr, &gh.dx)?;
        dcorr.data_mut().iter_mut().for_each(|v| *v = *v * cache.corr_scale);
        let (dfs, dft) = depthwise_corr_backward(&cache.fs, &cache.ft, &dcorr)?;
        self.extract_backward(&cache.search, &dfs)?;
        self.extract_backward(&cache.templ, &dft)?;
        Ok(())
    }
}

impl Model<f32> {
    pub fn to_weight_file(&self) -> Result<WeightFile> {
        Ok(WeightFile {
            meta: serde_json::json!({ "model": self.config }),
            tensors: self
                .params
                .params()
                .iter()
                .map(|p| NamedTensor {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    data: p.value.data().to_vec(),
                })
                .collect(),
        })
    }

    pub fn from_weight_file(file: &WeightFile) -> Result<Self> {
        let config: ModelConfig = serde_json::from_value(
            file.meta
                .get("model")
                .cloned()
                .ok_or_else(|| Error::WeightFormat("header has no model config".into()))?,
        )
        .map_err(|e| Error::WeightFormat(format!("model config: {e}")))?;
        let mut model = Model::<f32>::new(config, 0)?;
        let names: Vec<String> = model.params.names().map(str::to_string).collect();
        for name in names {
            let t = file
                .get(&name)
                .ok_or_else(|| Error::MissingParameter(name.clone()))?;
            let expect = model.params.get(&name)?.shape();
            if t.shape != expect {
                return Err(Error::Shape(format!(
                    "parameter {name}: file shape {:?}, model expects {expect:?}",
                    t.shape
                )));
            }
            *model.params.get_mut(&name)? = Tensor4::from_vec(expect, t.data.clone())?;
        }
        Ok(model)
    }

    pub fn save_weights(&self, path: &Path) -> Result<()> {
        write_weight_file(path, &self.to_weight_file()?)
    }

    pub fn load_weights(path: &Path) -> Result<Self> {
        Self::from_weight_file(&read_weight_file(path)?)
    }
}
