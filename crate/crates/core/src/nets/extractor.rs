//! Fixed feature extractors used for the perceptual loss and for the metrics.

use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;

use super::layers::Conv;
use crate::error::{Error, Result};
use crate::tensor::{Array, Graph, Mode, ParamSet, Var};

/// A frozen image-to-feature-map function. Implementations never expose
/// trainable parameters; gradients flow through to the input only.
pub trait FeatureExtractor: Send + Sync + std::fmt::Debug {
    /// Stable identifier recorded next to every metric computed with it.
    fn id(&self) -> &str;

    /// Differentiable feature map of an `[N, H, W, 3]` batch.
    fn forward<'g>(&self, g: &'g Graph<f32>, x: Var<'g, f32>) -> Var<'g, f32>;

    /// Flat per-image feature vectors `[N, f]` for distribution metrics.
    fn embed(&self, batch: &Array<f32>) -> Array<f32> {
        let g = Graph::new();
        let x = g.constant(batch.clone());
        let y = self.forward(&g, x).value();
        let n = y.shape()[0];
        let f = y.len() / n;
        (*y).clone().reshape(&[n, f])
    }
}

/// ReLU convolution stack with fixed weights, optionally average-pooled onto a
/// coarse `pool × pool` grid in [`FeatureExtractor::embed`].
#[derive(Debug, Clone)]
pub struct ConvFeatureExtractor {
    id: String,
    convs: Vec<Conv>,
    params: ParamSet<f32>,
    pool: Option<usize>,
}

impl ConvFeatureExtractor {
    /// Seeded random-weight extractor. `layers` lists `(out_channels, stride)`.
    pub fn random(seed: u64, layers: &[(usize, usize)], pool: Option<usize>) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new("extractor");
        let mut cin = 3;
        let convs = layers
            .iter()
            .enumerate()
            .map(|(i, &(cout, stride))| {
                let c = Conv::new(format!("layer{i}"), cin, cout, stride);
                c.init(&mut params, &mut rng);
                cin = cout;
                c
            })
            .collect();
        let shape: Vec<String> = layers.iter().map(|(c, s)| format!("{c}s{s}")).collect();
        Self {
            id: format!("random-conv[{}]-seed{seed}", shape.join(",")),
            convs,
            params,
            pool,
        }
    }

    /// Default perceptual extractor: two resolutions down, like the early
    /// blocks of an image classifier.
    pub fn perceptual(seed: u64) -> Self {
        Self::random(seed, &[(16, 1), (32, 2), (32, 1), (64, 2)], None)
    }

    /// Default metric extractor: pooled onto a 2×2 grid.
    pub fn metric(seed: u64) -> Self {
        Self::random(seed, &[(16, 1), (32, 2), (32, 2)], Some(2))
    }

    pub fn with_pool(mut self, pool: Option<usize>) -> Self {
        self.pool = pool;
        self
    }

    /// Loads an externally trained conv stack. Tensors are named
    /// `layer{i}.w` (`[9*cin, cout]`, f32) and `layer{i}.b`; the metadata key
    /// `strides` holds a comma-separated stride per layer.
    pub fn load(path: &Path, pool: Option<usize>) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let bad = |m: String| Error::Load {
            path: path.to_path_buf(),
            reason: m,
        };
        let (_, meta) = SafeTensors::read_metadata(&bytes).map_err(|e| bad(e.to_string()))?;
        let strides: Vec<usize> = meta
            .metadata()
            .as_ref()
            .and_then(|m| m.get("strides"))
            .ok_or_else(|| bad("missing `strides` metadata".into()))?
            .split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| bad(format!("bad stride {s:?}")))
            })
            .collect::<Result<_>>()?;
        let st = SafeTensors::deserialize(&bytes).map_err(|e| bad(e.to_string()))?;
        let mut params = ParamSet::new("extractor");
        let mut convs = Vec::new();
        let mut cin = 3;
        for (i, &stride) in strides.iter().enumerate() {
            let w = read_f32(&st, &format!("layer{i}.w")).map_err(bad)?;
            let b = read_f32(&st, &format!("layer{i}.b")).map_err(bad)?;
            if w.shape().len() != 2 || w.shape()[0] != 9 * cin || b.len() != w.shape()[1] {
                return Err(bad(format!(
                    "layer{i} has incompatible shape {:?}",
                    w.shape()
                )));
            }
            let cout = w.shape()[1];
            params.insert(format!("layer{i}.w"), w);
            params.insert(format!("layer{i}.b"), b);
            convs.push(Conv::new(format!("layer{i}"), cin, cout, stride));
            cin = cout;
        }
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("external");
        Ok(Self {
            id: format!("external:{stem}"),
            convs,
            params,
            pool,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let strides: Vec<String> = self.convs.iter().map(|c| c.stride.to_string()).collect();
        let meta = HashMap::from([("strides".to_string(), strides.join(","))]);
        let buffers: Vec<(String, Vec<usize>, Vec<u8>)> = self
            .params
            .iter()
            .map(|(n, a)| (n.to_string(), a.shape().to_vec(), f32_bytes(a.data())))
            .collect();
        let views = buffers
            .iter()
            .map(|(n, s, b)| Ok((n.clone(), TensorView::new(Dtype::F32, s.clone(), b)?)))
            .collect::<std::result::Result<Vec<_>, safetensors::SafeTensorError>>()
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        safetensors::serialize_to_file(views, Some(meta), path)
            .map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

impl FeatureExtractor for ConvFeatureExtractor {
    fn id(&self) -> &str {
        &self.id
    }

    fn forward<'g>(&self, g: &'g Graph<f32>, x: Var<'g, f32>) -> Var<'g, f32> {
        self.convs
            .iter()
            .fold(x, |h, c| c.forward(g, &self.params, h, Mode::Frozen).relu())
    }

    fn embed(&self, batch: &Array<f32>) -> Array<f32> {
        let g = Graph::new();
        let y = self.forward(&g, g.constant(batch.clone())).value();
        match self.pool {
            None => {
                let n = y.shape()[0];
                (*y).clone().reshape(&[n, y.len() / n])
            }
            Some(p) => avg_pool_grid(&y, p),
        }
    }
}

/// Averages an `[N, H, W, C]` map over a `p × p` grid of equal cells.
fn avg_pool_grid(y: &Array<f32>, p: usize) -> Array<f32> {
    let s = y.shape();
    let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
    let (ch, cw) = ((h / p).max(1), (w / p).max(1));
    let mut out = vec![0f32; n * p * p * c];
    let d = y.data();
    for b in 0..n {
        for gy in 0..p {
            for gx in 0..p {
                let o = ((b * p + gy) * p + gx) * c;
                for yy in gy * ch..((gy + 1) * ch).min(h) {
                    for xx in gx * cw..((gx + 1) * cw).min(w) {
                        let i = ((b * h + yy) * w + xx) * c;
                        for k in 0..c {
                            out[o + k] += d[i + k];
                        }
                    }
                }
                let cells = (ch * cw) as f32;
                out[o..o + c].iter_mut().for_each(|v| *v /= cells);
            }
        }
    }
    Array::from_vec(&[n, p * p * c], out)
}

pub(crate) fn f32_bytes(data: &[f32]) -> Vec<u8> {
    data.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub(crate) fn read_f32(
    st: &SafeTensors<'_>,
    name: &str,
) -> std::result::Result<Array<f32>, String> {
    let view = st.tensor(name).map_err(|e| format!("{name}: {e}"))?;
    if view.dtype() != Dtype::F32 {
        return Err(format!("{name}: expected f32, found {:?}", view.dtype()));
    }
    let data = view
        .data()
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok(Array::from_vec(view.shape(), data))
}
