//! Declarative network construction: DCGAN discriminator/generator pairs,
//! residual GAN variants, and small MLP pairs for low-dimensional data,
//! each in vanilla, batch-normalized, and weight-normalized form.
//!
//! A [`NetworkSpec`] is a pure description (serializable to canonical
//! JSON); [`Network::init`] materializes parameters deterministically from
//! a seeded generator. The staged runner enters parameters on a tape once
//! and can run several forward passes against them, which is what the
//! training loop needs for the separate-batch rule.

use crate::error::{Error, Result};
use crate::layers::{self, Mode, WnMode};
use crate::rng::DetRng;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Vanilla,
    Bn,
    Wn,
}

impl Variant {
    pub fn parse(s: &str) -> Result<Variant> {
        match s {
            "vanilla" => Ok(Variant::Vanilla),
            "bn" => Ok(Variant::Bn),
            "wn" => Ok(Variant::Wn),
            other => Err(Error::InvalidArg(format!(
                "unknown variant '{other}' (expected vanilla|bn|wn)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Discriminator,
    Generator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", deny_unknown_fields)]
pub enum LayerSpec {
    Linear {
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    },
    StrictWnLinear {
        in_dim: usize,
        out_dim: usize,
    },
    AffineWnLinear {
        in_dim: usize,
        out_dim: usize,
    },
    Conv {
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    },
    ConvTranspose {
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    },
    WnConv {
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        affine: bool,
    },
    WnConvTranspose {
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        affine: bool,
    },
    /// First generator layer implemented as a strict weight-normalized
    /// fully connected layer reshaped to a `[channels, spatial, spatial]`
    /// map; normalization runs over the latent inputs only.
    WnFcFirst {
        latent: usize,
        channels: usize,
        spatial: usize,
    },
    PRelu {
        channels: usize,
    },
    TPRelu {
        channels: usize,
    },
    BatchNorm {
        channels: usize,
        mean_only: bool,
    },
    Sigmoid,
    AvgPool {
        k: usize,
    },
    NearestUpscale {
        factor: usize,
    },
    Reshape {
        shape: Vec<usize>,
    },
    ResBlock {
        shortcut: Vec<LayerSpec>,
        residue: Vec<LayerSpec>,
        combine: CombineSpec,
        post: Box<LayerSpec>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", deny_unknown_fields)]
pub enum CombineSpec {
    Sum,
    WnAdd { channels: usize },
}

/// One row of the architecture table: kernel, stride, padding, output
/// features, and the layer family name.
#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub layer: &'static str,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out: usize,
}

impl LayerSpec {
    /// Architecture-table row for convolution-like layers; activations,
    /// normalization and shape plumbing return `None`.
    pub fn table_row(&self) -> Option<TableRow> {
        match *self {
            LayerSpec::Conv {
                c_out,
                kernel,
                stride,
                pad,
                ..
            } => Some(TableRow {
                layer: "Conv",
                kernel,
                stride,
                pad,
                out: c_out,
            }),
            LayerSpec::ConvTranspose {
                c_out,
                kernel,
                stride,
                pad,
                ..
            } => Some(TableRow {
                layer: "Conv",
                kernel,
                stride,
                pad,
                out: c_out,
            }),
            LayerSpec::WnConv {
                c_out,
                kernel,
                stride,
                pad,
                affine,
                ..
            } => Some(TableRow {
                layer: if affine { "AWNConv" } else { "SWNConv" },
                kernel,
                stride,
                pad,
                out: c_out,
            }),
            LayerSpec::WnConvTranspose {
                c_out,
                kernel,
                stride,
                pad,
                affine,
                ..
            } => Some(TableRow {
                layer: if affine { "AWNConv" } else { "SWNConv" },
                kernel,
                stride,
                pad,
                out: c_out,
            }),
            LayerSpec::WnFcFirst {
                channels, spatial, ..
            } => Some(TableRow {
                layer: "SWNConv",
                kernel: spatial,
                stride: 1,
                pad: 0,
                out: channels,
            }),
            _ => None,
        }
    }

    /// Counts convolution layers the way the architecture is sized:
    /// residue-branch convolutions count, shortcut projections do not.
    fn conv_layer_count(&self) -> usize {
        match self {
            LayerSpec::Conv { .. }
            | LayerSpec::ConvTranspose { .. }
            | LayerSpec::WnConv { .. }
            | LayerSpec::WnConvTranspose { .. }
            | LayerSpec::WnFcFirst { .. } => 1,
            LayerSpec::ResBlock { residue, .. } => {
                residue.iter().map(|l| l.conv_layer_count()).sum()
            }
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub role: Role,
    pub variant: Variant,
    /// Per-sample input shape (`[3, h, w]` images, `[d]` vectors, or
    /// `[latent]` codes).
    pub input_shape: Vec<usize>,
    /// Per-sample output shape.
    pub output_shape: Vec<usize>,
    pub latent_dim: usize,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    /// Canonical JSON form: fixed field order, no whitespace variance.
    pub fn to_canonical_json(&self) -> String {
        serde_json::to_string(self).expect("network spec serializes")
    }

    pub fn from_json(s: &str) -> Result<NetworkSpec> {
        serde_json::from_str(s).map_err(|e| Error::Parse(format!("network spec: {e}")))
    }

    /// Architecture-table rows of all convolution-like layers.
    pub fn conv_table(&self) -> Vec<TableRow> {
        self.layers.iter().filter_map(|l| l.table_row()).collect()
    }

    /// Depth in the architecture-sizing sense (residue convolutions plus
    /// top-level convolution layers).
    pub fn conv_layer_count(&self) -> usize {
        self.layers.iter().map(|l| l.conv_layer_count()).sum()
    }
}

// ── builders ────────────────────────────────────────────────────────────

fn act(variant: Variant, channels: usize) -> LayerSpec {
    match variant {
        Variant::Wn => LayerSpec::TPRelu { channels },
        _ => LayerSpec::PRelu { channels },
    }
}

/// Spatial sizes visited by repeated stride-2 halving from `image_size`
/// down to exactly `min_spatial`.
fn halving_plan(image_size: usize, min_spatial: usize) -> Result<Vec<usize>> {
    if min_spatial == 0 || image_size < min_spatial {
        return Err(Error::InvalidArg(format!(
            "image size {image_size} not reducible to min spatial {min_spatial}"
        )));
    }
    let mut sizes = vec![image_size];
    let mut s = image_size;
    while s > min_spatial {
        if !s.is_multiple_of(2) {
            return Err(Error::InvalidArg(format!(
                "image size {image_size} not reducible to min spatial {min_spatial}: \
                 odd intermediate size {s}"
            )));
        }
        s /= 2;
        sizes.push(s);
    }
    if s != min_spatial {
        return Err(Error::InvalidArg(format!(
            "image size {image_size} not reducible to min spatial {min_spatial}: \
             halving reaches {s}"
        )));
    }
    Ok(sizes)
}

/// Builds the DCGAN pair: stride-2 kernel-4 pad-1 convolutions doubling the
/// feature count from `base_features` until the spatial size reaches
/// `min_spatial`, then one full-extent convolution to a single sigmoid
/// output. The generator mirrors the discriminator with transposed
/// convolutions. Batch normalization skips the first discriminator layer
/// and the final layer of both networks; the weight-normalized variant is
/// strict everywhere except the two final layers and uses a fully
/// connected first generator layer.
pub fn build_dcgan(
    variant: Variant,
    image_size: usize,
    base_features: usize,
    latent_dim: usize,
    min_spatial: usize,
) -> Result<(NetworkSpec, NetworkSpec)> {
    let sizes = halving_plan(image_size, min_spatial)?;
    let n_stride2 = sizes.len() - 1;
    if n_stride2 == 0 {
        return Err(Error::InvalidArg(format!(
            "image size {image_size} equals min spatial {min_spatial}: no layers to build"
        )));
    }
    let feats: Vec<usize> = (0..n_stride2).map(|i| base_features << i).collect();
    let top = *feats.last().unwrap();

    // discriminator
    let mut d = Vec::new();
    let mut c_in = 3;
    for (i, &f) in feats.iter().enumerate() {
        match variant {
            Variant::Wn => d.push(LayerSpec::WnConv {
                c_in,
                c_out: f,
                kernel: 4,
                stride: 2,
                pad: 1,
                affine: false,
            }),
            _ => d.push(LayerSpec::Conv {
                c_in,
                c_out: f,
                kernel: 4,
                stride: 2,
                pad: 1,
                bias: true,
            }),
        }
        if variant == Variant::Bn && i > 0 {
            d.push(LayerSpec::BatchNorm {
                channels: f,
                mean_only: false,
            });
        }
        d.push(act(variant, f));
        c_in = f;
    }
    match variant {
        Variant::Wn => d.push(LayerSpec::WnConv {
            c_in: top,
            c_out: 1,
            kernel: min_spatial,
            stride: 1,
            pad: 0,
            affine: true,
        }),
        _ => d.push(LayerSpec::Conv {
            c_in: top,
            c_out: 1,
            kernel: min_spatial,
            stride: 1,
            pad: 0,
            bias: true,
        }),
    }
    d.push(LayerSpec::Sigmoid);

    // generator: mirror with transposed convolutions
    let mut g = Vec::new();
    match variant {
        Variant::Wn => g.push(LayerSpec::WnFcFirst {
            latent: latent_dim,
            channels: top,
            spatial: min_spatial,
        }),
        _ => {
            g.push(LayerSpec::Reshape {
                shape: vec![latent_dim, 1, 1],
            });
            g.push(LayerSpec::ConvTranspose {
                c_in: latent_dim,
                c_out: top,
                kernel: min_spatial,
                stride: 1,
                pad: 0,
                bias: true,
            });
        }
    }
    if variant == Variant::Bn {
        g.push(LayerSpec::BatchNorm {
            channels: top,
            mean_only: false,
        });
    }
    g.push(act(variant, top));
    for i in (0..n_stride2 - 1).rev() {
        let (ci, co) = (feats[i + 1], feats[i]);
        match variant {
            Variant::Wn => g.push(LayerSpec::WnConvTranspose {
                c_in: ci,
                c_out: co,
                kernel: 4,
                stride: 2,
                pad: 1,
                affine: false,
            }),
            _ => g.push(LayerSpec::ConvTranspose {
                c_in: ci,
                c_out: co,
                kernel: 4,
                stride: 2,
                pad: 1,
                bias: true,
            }),
        }
        if variant == Variant::Bn {
            g.push(LayerSpec::BatchNorm {
                channels: co,
                mean_only: false,
            });
        }
        g.push(act(variant, co));
    }
    match variant {
        Variant::Wn => g.push(LayerSpec::WnConvTranspose {
            c_in: base_features,
            c_out: 3,
            kernel: 4,
            stride: 2,
            pad: 1,
            affine: true,
        }),
        _ => g.push(LayerSpec::ConvTranspose {
            c_in: base_features,
            c_out: 3,
            kernel: 4,
            stride: 2,
            pad: 1,
            bias: true,
        }),
    }
    g.push(LayerSpec::Sigmoid);

    let image_shape = vec![3, image_size, image_size];
    Ok((
        NetworkSpec {
            role: Role::Discriminator,
            variant,
            input_shape: image_shape.clone(),
            output_shape: vec![1, 1, 1],
            latent_dim,
            layers: d,
        },
        NetworkSpec {
            role: Role::Generator,
            variant,
            input_shape: vec![latent_dim],
            output_shape: image_shape,
            latent_dim,
            layers: g,
        },
    ))
}

/// Residual block for the discriminator side. Shortcut: average pooling
/// when stride is 2, then a 1x1 projection when the feature count changes.
/// Residue: two convolutions (kernel 4 at stride 2, else 3; always pad 1)
/// with batch normalization after each in the BN variant.
pub fn res_block_spec(
    variant: Variant,
    stride: usize,
    c_in: usize,
    c_out: usize,
    transposed: bool,
) -> Result<LayerSpec> {
    if stride != 1 && stride != 2 {
        return Err(Error::InvalidArg(format!(
            "res block stride must be 1 or 2, got {stride}"
        )));
    }
    let mut shortcut = Vec::new();
    if stride == 2 {
        shortcut.push(if transposed {
            LayerSpec::NearestUpscale { factor: 2 }
        } else {
            LayerSpec::AvgPool { k: 2 }
        });
    }
    if c_in != c_out {
        shortcut.push(match (variant, transposed) {
            (Variant::Wn, false) => LayerSpec::WnConv {
                c_in,
                c_out,
                kernel: 1,
                stride: 1,
                pad: 0,
                affine: false,
            },
            (Variant::Wn, true) => LayerSpec::WnConvTranspose {
                c_in,
                c_out,
                kernel: 1,
                stride: 1,
                pad: 0,
                affine: false,
            },
            (_, false) => LayerSpec::Conv {
                c_in,
                c_out,
                kernel: 1,
                stride: 1,
                pad: 0,
                bias: true,
            },
            (_, true) => LayerSpec::ConvTranspose {
                c_in,
                c_out,
                kernel: 1,
                stride: 1,
                pad: 0,
                bias: true,
            },
        });
    }

    let k1 = if stride == 2 { 4 } else { 3 };
    let mut residue = Vec::new();
    let conv = |ci: usize, co: usize, k: usize, s: usize| match (variant, transposed) {
        (Variant::Wn, false) => LayerSpec::WnConv {
            c_in: ci,
            c_out: co,
            kernel: k,
            stride: s,
            pad: 1,
            affine: false,
        },
        (Variant::Wn, true) => LayerSpec::WnConvTranspose {
            c_in: ci,
            c_out: co,
            kernel: k,
            stride: s,
            pad: 1,
            affine: false,
        },
        (_, false) => LayerSpec::Conv {
            c_in: ci,
            c_out: co,
            kernel: k,
            stride: s,
            pad: 1,
            bias: true,
        },
        (_, true) => LayerSpec::ConvTranspose {
            c_in: ci,
            c_out: co,
            kernel: k,
            stride: s,
            pad: 1,
            bias: true,
        },
    };
    residue.push(conv(c_in, c_out, k1, stride));
    if variant == Variant::Bn {
        residue.push(LayerSpec::BatchNorm {
            channels: c_out,
            mean_only: false,
        });
    }
    residue.push(act(variant, c_out));
    residue.push(conv(c_out, c_out, 3, 1));
    if variant == Variant::Bn {
        residue.push(LayerSpec::BatchNorm {
            channels: c_out,
            mean_only: false,
        });
    }

    Ok(LayerSpec::ResBlock {
        shortcut,
        residue,
        combine: match variant {
            Variant::Wn => CombineSpec::WnAdd { channels: c_out },
            _ => CombineSpec::Sum,
        },
        post: Box::new(act(variant, c_out)),
    })
}

/// Residual GAN pair: one stride-2 block plus one stride-1 block per
/// feature-plan level, then a full-extent convolution, mirrored for the
/// generator with transposed convolutions and nearest-neighbour upscaling
/// in place of average pooling.
pub fn build_resnet_gan(
    variant: Variant,
    image_size: usize,
    feature_plan: &[usize],
    latent_dim: usize,
    min_spatial: usize,
) -> Result<(NetworkSpec, NetworkSpec)> {
    if feature_plan.is_empty() {
        return Err(Error::InvalidArg("feature plan must be nonempty".into()));
    }
    let levels = feature_plan.len();
    if image_size != min_spatial << levels {
        return Err(Error::InvalidArg(format!(
            "image size {image_size} with {levels} levels does not reach min spatial \
             {min_spatial} (expected {})",
            min_spatial << levels
        )));
    }
    let top = *feature_plan.last().unwrap();

    let mut d = Vec::new();
    let mut c_in = 3;
    for &f in feature_plan {
        d.push(res_block_spec(variant, 2, c_in, f, false)?);
        d.push(res_block_spec(variant, 1, f, f, false)?);
        c_in = f;
    }
    match variant {
        Variant::Wn => d.push(LayerSpec::WnConv {
            c_in: top,
            c_out: 1,
            kernel: min_spatial,
            stride: 1,
            pad: 0,
            affine: true,
        }),
        _ => d.push(LayerSpec::Conv {
            c_in: top,
            c_out: 1,
            kernel: min_spatial,
            stride: 1,
            pad: 0,
            bias: true,
        }),
    }
    d.push(LayerSpec::Sigmoid);

    let mut g = Vec::new();
    match variant {
        Variant::Wn => g.push(LayerSpec::WnFcFirst {
            latent: latent_dim,
            channels: top,
            spatial: min_spatial,
        }),
        _ => {
            g.push(LayerSpec::Reshape {
                shape: vec![latent_dim, 1, 1],
            });
            g.push(LayerSpec::ConvTranspose {
                c_in: latent_dim,
                c_out: top,
                kernel: min_spatial,
                stride: 1,
                pad: 0,
                bias: true,
            });
        }
    }
    if variant == Variant::Bn {
        g.push(LayerSpec::BatchNorm {
            channels: top,
            mean_only: false,
        });
    }
    g.push(act(variant, top));
    for i in (0..levels).rev() {
        let f = feature_plan[i];
        let next = if i == 0 { 3 } else { feature_plan[i - 1] };
        g.push(res_block_spec(variant, 1, f, f, true)?);
        g.push(res_block_spec(variant, 2, f, next, true)?);
    }
    g.push(LayerSpec::Sigmoid);

    let image_shape = vec![3, image_size, image_size];
    Ok((
        NetworkSpec {
            role: Role::Discriminator,
            variant,
            input_shape: image_shape.clone(),
            output_shape: vec![1, 1, 1],
            latent_dim,
            layers: d,
        },
        NetworkSpec {
            role: Role::Generator,
            variant,
            input_shape: vec![latent_dim],
            output_shape: image_shape,
            latent_dim,
            layers: g,
        },
    ))
}

/// Two-layer MLP pair for low-dimensional data. `gen_sigmoid` controls the
/// generator output nonlinearity (on for [0,1]-normalized datasets).
pub fn build_mlp_gan(
    variant: Variant,
    data_dim: usize,
    hidden: usize,
    latent_dim: usize,
    gen_sigmoid: bool,
) -> Result<(NetworkSpec, NetworkSpec)> {
    if data_dim == 0 || hidden == 0 || latent_dim == 0 {
        return Err(Error::InvalidArg(
            "mlp builder needs positive dimensions".into(),
        ));
    }
    let mut d = Vec::new();
    match variant {
        Variant::Wn => {
            d.push(LayerSpec::StrictWnLinear {
                in_dim: data_dim,
                out_dim: hidden,
            });
            d.push(act(variant, hidden));
            d.push(LayerSpec::AffineWnLinear {
                in_dim: hidden,
                out_dim: 1,
            });
        }
        _ => {
            // with two layers, the no-BN-on-first/last rule leaves the
            // discriminator without batch normalization
            d.push(LayerSpec::Linear {
                in_dim: data_dim,
                out_dim: hidden,
                bias: true,
            });
            d.push(act(variant, hidden));
            d.push(LayerSpec::Linear {
                in_dim: hidden,
                out_dim: 1,
                bias: true,
            });
        }
    }
    d.push(LayerSpec::Sigmoid);

    let mut g = Vec::new();
    match variant {
        Variant::Wn => {
            g.push(LayerSpec::StrictWnLinear {
                in_dim: latent_dim,
                out_dim: hidden,
            });
            g.push(act(variant, hidden));
            g.push(LayerSpec::AffineWnLinear {
                in_dim: hidden,
                out_dim: data_dim,
            });
        }
        _ => {
            g.push(LayerSpec::Linear {
                in_dim: latent_dim,
                out_dim: hidden,
                bias: true,
            });
            if variant == Variant::Bn {
                g.push(LayerSpec::BatchNorm {
                    channels: hidden,
                    mean_only: false,
                });
            }
            g.push(act(variant, hidden));
            g.push(LayerSpec::Linear {
                in_dim: hidden,
                out_dim: data_dim,
                bias: true,
            });
        }
    }
    if gen_sigmoid {
        g.push(LayerSpec::Sigmoid);
    }

    Ok((
        NetworkSpec {
            role: Role::Discriminator,
            variant,
            input_shape: vec![data_dim],
            output_shape: vec![1],
            latent_dim,
            layers: d,
        },
        NetworkSpec {
            role: Role::Generator,
            variant,
            input_shape: vec![latent_dim],
            output_shape: vec![data_dim],
            latent_dim,
            layers: g,
        },
    ))
}

// ── instantiation ───────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub enum CombineLayer {
    Sum,
    WnAdd(layers::WnAdd),
}

/// A layer with materialized parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Linear(layers::Linear),
    StrictWnLinear(layers::StrictWnLinear),
    AffineWnLinear(layers::AffineWnLinear),
    Conv(layers::Conv2d),
    ConvTranspose(layers::ConvTranspose2d),
    WnConv(layers::WnConv2d),
    WnConvTranspose(layers::WnConvTranspose2d),
    WnFcFirst {
        inner: layers::StrictWnLinear,
        channels: usize,
        spatial: usize,
    },
    PRelu(layers::PRelu),
    TPRelu(layers::TPRelu),
    BatchNorm(layers::BatchNorm),
    Sigmoid,
    AvgPool {
        k: usize,
    },
    NearestUpscale {
        factor: usize,
    },
    Reshape {
        shape: Vec<usize>,
    },
    ResBlock {
        shortcut: Vec<Layer>,
        residue: Vec<Layer>,
        combine: CombineLayer,
        post: Box<Layer>,
    },
}

/// Special uniform bound for the first generator layer's weights.
const FIRST_LAYER_INIT_SCALE: f64 = 0.01;

fn init_layer(spec: &LayerSpec, rng: &mut DetRng) -> Layer {
    match spec {
        LayerSpec::Linear {
            in_dim,
            out_dim,
            bias,
        } => Layer::Linear(layers::Linear::init(*out_dim, *in_dim, *bias, rng)),
        LayerSpec::StrictWnLinear { in_dim, out_dim } => {
            Layer::StrictWnLinear(layers::StrictWnLinear::init(*out_dim, *in_dim, rng))
        }
        LayerSpec::AffineWnLinear { in_dim, out_dim } => {
            Layer::AffineWnLinear(layers::AffineWnLinear::init(*out_dim, *in_dim, rng))
        }
        LayerSpec::Conv {
            c_in,
            c_out,
            kernel,
            stride,
            pad,
            bias,
        } => Layer::Conv(layers::Conv2d::init(
            *c_out, *c_in, *kernel, *stride, *pad, *bias, rng,
        )),
        LayerSpec::ConvTranspose {
            c_in,
            c_out,
            kernel,
            stride,
            pad,
            bias,
        } => Layer::ConvTranspose(layers::ConvTranspose2d::init(
            *c_in, *c_out, *kernel, *stride, *pad, *bias, rng,
        )),
        LayerSpec::WnConv {
            c_in,
            c_out,
            kernel,
            stride,
            pad,
            affine,
        } => Layer::WnConv(layers::WnConv2d::init(
            *c_out,
            *c_in,
            *kernel,
            *stride,
            *pad,
            if *affine { WnMode::Affine } else { WnMode::Strict },
            rng,
        )),
        LayerSpec::WnConvTranspose {
            c_in,
            c_out,
            kernel,
            stride,
            pad,
            affine,
        } => Layer::WnConvTranspose(layers::WnConvTranspose2d::init(
            *c_in,
            *c_out,
            *kernel,
            *stride,
            *pad,
            if *affine { WnMode::Affine } else { WnMode::Strict },
            rng,
        )),
        LayerSpec::WnFcFirst {
            latent,
            channels,
            spatial,
        } => {
            let out = channels * spatial * spatial;
            let bound = FIRST_LAYER_INIT_SCALE / (*latent as f64).sqrt();
            let mut data = vec![0.0; out * latent];
            rng.fill_uniform(&mut data, -bound, bound);
            Layer::WnFcFirst {
                inner: layers::StrictWnLinear {
                    weight: Tensor::from_vec(vec![out, *latent], data).unwrap(),
                },
                channels: *channels,
                spatial: *spatial,
            }
        }
        LayerSpec::PRelu { channels } => Layer::PRelu(layers::PRelu::init(*channels)),
        LayerSpec::TPRelu { channels } => Layer::TPRelu(layers::TPRelu::init(*channels)),
        LayerSpec::BatchNorm {
            channels,
            mean_only,
        } => Layer::BatchNorm(layers::BatchNorm::init(*channels, *mean_only)),
        LayerSpec::Sigmoid => Layer::Sigmoid,
        LayerSpec::AvgPool { k } => Layer::AvgPool { k: *k },
        LayerSpec::NearestUpscale { factor } => Layer::NearestUpscale { factor: *factor },
        LayerSpec::Reshape { shape } => Layer::Reshape {
            shape: shape.clone(),
        },
        LayerSpec::ResBlock {
            shortcut,
            residue,
            combine,
            post,
        } => Layer::ResBlock {
            shortcut: shortcut.iter().map(|l| init_layer(l, rng)).collect(),
            residue: residue.iter().map(|l| init_layer(l, rng)).collect(),
            combine: match combine {
                CombineSpec::Sum => CombineLayer::Sum,
                CombineSpec::WnAdd { channels } => {
                    CombineLayer::WnAdd(layers::WnAdd::init_shortcut(*channels))
                }
            },
            post: Box::new(init_layer(post, rng)),
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Gamma,
    Beta,
    Alpha,
    Slope,
    AddWeight,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub spec: NetworkSpec,
    pub layers: Vec<Layer>,
}

impl Network {
    /// Materializes parameters for a spec; identical spec and seed give
    /// identical parameters.
    pub fn init(spec: &NetworkSpec, rng: &mut DetRng) -> Network {
        Network {
            spec: spec.clone(),
            layers: spec.layers.iter().map(|l| init_layer(l, rng)).collect(),
        }
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(&str, ParamKind, &Tensor)) {
        for (i, layer) in self.layers.iter().enumerate() {
            visit_layer(layer, &format!("l{i}"), f);
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor)) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            visit_layer_mut(layer, &format!("l{i}"), f);
        }
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, _, t| n += t.numel());
        n
    }

    /// Clamps every parametric-ReLU slope into `[0,1]`; runs after each
    /// optimizer step.
    pub fn clip_slopes(&mut self) {
        self.visit_params_mut(&mut |_, kind, t| {
            if kind == ParamKind::Slope {
                for v in t.data_mut() {
                    *v = v.clamp(0.0, 1.0);
                }
            }
        });
    }

    /// Batch-normalization layers in traversal order.
    pub fn bn_layers(&self) -> Vec<&layers::BatchNorm> {
        let mut out = Vec::new();
        for layer in self.layers.iter() {
            collect_bn_ref(layer, &mut out);
        }
        out
    }

    pub fn bn_layers_mut(&mut self) -> Vec<&mut layers::BatchNorm> {
        let mut out = Vec::new();
        for layer in self.layers.iter_mut() {
            collect_bn(layer, &mut out);
        }
        out
    }

    /// Folds one training forward's batch statistics (in traversal order)
    /// into the running estimates.
    pub fn apply_bn_updates(&mut self, stats: &[layers::BnBatchStats]) {
        let mut bns = self.bn_layers_mut();
        debug_assert_eq!(bns.len(), stats.len());
        for (bn, s) in bns.iter_mut().zip(stats.iter()) {
            bn.apply_update(s);
        }
    }

    /// Enters every parameter on the tape once, in traversal order.
    pub fn stage<'n>(&'n self, tape: &mut Tape) -> StagedNet<'n> {
        let mut params = Vec::new();
        let staged = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| stage_layer(l, &format!("l{i}"), tape, &mut params))
            .collect();
        StagedNet {
            net: self,
            layers: staged,
            params,
        }
    }
}

fn collect_bn<'a>(layer: &'a mut Layer, out: &mut Vec<&'a mut layers::BatchNorm>) {
    match layer {
        Layer::BatchNorm(bn) => out.push(bn),
        Layer::ResBlock {
            shortcut,
            residue,
            post,
            ..
        } => {
            for l in shortcut.iter_mut() {
                collect_bn(l, out);
            }
            for l in residue.iter_mut() {
                collect_bn(l, out);
            }
            collect_bn(post, out);
        }
        _ => {}
    }
}

fn collect_bn_ref<'a>(layer: &'a Layer, out: &mut Vec<&'a layers::BatchNorm>) {
    match layer {
        Layer::BatchNorm(bn) => out.push(bn),
        Layer::ResBlock {
            shortcut,
            residue,
            post,
            ..
        } => {
            for l in shortcut.iter() {
                collect_bn_ref(l, out);
            }
            for l in residue.iter() {
                collect_bn_ref(l, out);
            }
            collect_bn_ref(post, out);
        }
        _ => {}
    }
}

fn visit_layer(layer: &Layer, path: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor)) {
    use ParamKind::*;
    match layer {
        Layer::Linear(l) => {
            f(&format!("{path}.weight"), Weight, &l.weight);
            if let Some(b) = &l.bias {
                f(&format!("{path}.bias"), Bias, b);
            }
        }
        Layer::StrictWnLinear(l) => f(&format!("{path}.weight"), Weight, &l.weight),
        Layer::AffineWnLinear(l) => {
            f(&format!("{path}.weight"), Weight, &l.weight);
            f(&format!("{path}.gamma"), Gamma, &l.gamma);
            f(&format!("{path}.beta"), Beta, &l.beta);
        }
        Layer::Conv(l) => {
            f(&format!("{path}.kernel"), Weight, &l.kernel);
            if let Some(b) = &l.bias {
                f(&format!("{path}.bias"), Bias, b);
            }
        }
        Layer::ConvTranspose(l) => {
            f(&format!("{path}.kernel"), Weight, &l.kernel);
            if let Some(b) = &l.bias {
                f(&format!("{path}.bias"), Bias, b);
            }
        }
        Layer::WnConv(l) => {
            f(&format!("{path}.kernel"), Weight, &l.kernel);
            if let Some((g, b)) = &l.affine {
                f(&format!("{path}.gamma"), Gamma, g);
                f(&format!("{path}.beta"), Beta, b);
            }
        }
        Layer::WnConvTranspose(l) => {
            f(&format!("{path}.kernel"), Weight, &l.kernel);
            if let Some((g, b)) = &l.affine {
                f(&format!("{path}.gamma"), Gamma, g);
                f(&format!("{path}.beta"), Beta, b);
            }
        }
        Layer::WnFcFirst { inner, .. } => f(&format!("{path}.weight"), Weight, &inner.weight),
        Layer::PRelu(l) => f(&format!("{path}.slope"), Slope, &l.slope),
        Layer::TPRelu(l) => {
            f(&format!("{path}.alpha"), Alpha, &l.alpha);
            f(&format!("{path}.slope"), Slope, &l.slope);
        }
        Layer::BatchNorm(bn) => {
            f(&format!("{path}.gamma"), Gamma, &bn.gamma);
            f(&format!("{path}.beta"), Beta, &bn.beta);
        }
        Layer::Sigmoid
        | Layer::AvgPool { .. }
        | Layer::NearestUpscale { .. }
        | Layer::Reshape { .. } => {}
        Layer::ResBlock {
            shortcut,
            residue,
            combine,
            post,
        } => {
            for (i, l) in shortcut.iter().enumerate() {
                visit_layer(l, &format!("{path}.shortcut{i}"), f);
            }
            for (i, l) in residue.iter().enumerate() {
                visit_layer(l, &format!("{path}.residue{i}"), f);
            }
            if let CombineLayer::WnAdd(add) = combine {
                f(&format!("{path}.add.w1"), AddWeight, &add.w1);
                f(&format!("{path}.add.w2"), AddWeight, &add.w2);
            }
            visit_layer(post, &format!("{path}.post"), f);
        }
    }
}

fn visit_layer_mut(layer: &mut Layer, path: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor)) {
    use ParamKind::*;
    match layer {
        Layer::Linear(l) => {
            f(&format!("{path}.weight"), Weight, &mut l.weight);
            if let Some(b) = &mut l.bias {
                f(&format!("{path}.bias"), Bias, b);
            }
        }
        Layer::StrictWnLinear(l) => f(&format!("{path}.weight"), Weight, &mut l.weight),
        Layer::AffineWnLinear(l) => {
            f(&format!("{path}.weight"), Weight, &mut l.weight);
            f(&format!("{path}.gamma"), Gamma, &mut l.gamma);
            f(&format!("{path}.beta"), Beta, &mut l.beta);
        }
        Layer::Conv(l) => {
            f(&format!("{path}.kernel"), Weight, &mut l.kernel);
            if let Some(b) = &mut l.bias {
                f(&format!("{path}.bias"), Bias, b);
            }
        }
        Layer::ConvTranspose(l) => {
            f(&format!("{path}.kernel"), Weight, &mut l.kernel);
            if let Some(b) = &mut l.bias {
                f(&format!("{path}.bias"), Bias, b);
            }
        }
        Layer::WnConv(l) => {
            f(&format!("{path}.kernel"), Weight, &mut l.kernel);
            if let Some((g, b)) = &mut l.affine {
                f(&format!("{path}.gamma"), Gamma, g);
                f(&format!("{path}.beta"), Beta, b);
            }
        }
        Layer::WnConvTranspose(l) => {
            f(&format!("{path}.kernel"), Weight, &mut l.kernel);
            if let Some((g, b)) = &mut l.affine {
                f(&format!("{path}.gamma"), Gamma, g);
                f(&format!("{path}.beta"), Beta, b);
            }
        }
        Layer::WnFcFirst { inner, .. } => {
            f(&format!("{path}.weight"), Weight, &mut inner.weight)
        }
        Layer::PRelu(l) => f(&format!("{path}.slope"), Slope, &mut l.slope),
        Layer::TPRelu(l) => {
            f(&format!("{path}.alpha"), Alpha, &mut l.alpha);
            f(&format!("{path}.slope"), Slope, &mut l.slope);
        }
        Layer::BatchNorm(bn) => {
            f(&format!("{path}.gamma"), Gamma, &mut bn.gamma);
            f(&format!("{path}.beta"), Beta, &mut bn.beta);
        }
        Layer::Sigmoid
        | Layer::AvgPool { .. }
        | Layer::NearestUpscale { .. }
        | Layer::Reshape { .. } => {}
        Layer::ResBlock {
            shortcut,
            residue,
            combine,
            post,
        } => {
            for (i, l) in shortcut.iter_mut().enumerate() {
                visit_layer_mut(l, &format!("{path}.shortcut{i}"), f);
            }
            for (i, l) in residue.iter_mut().enumerate() {
                visit_layer_mut(l, &format!("{path}.residue{i}"), f);
            }
            if let CombineLayer::WnAdd(add) = combine {
                f(&format!("{path}.add.w1"), AddWeight, &mut add.w1);
                f(&format!("{path}.add.w2"), AddWeight, &mut add.w2);
            }
            visit_layer_mut(post, &format!("{path}.post"), f);
        }
    }
}

// ── staged forward ──────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct StagedParam {
    pub path: String,
    pub kind: ParamKind,
    pub id: NodeId,
}

enum StagedLayer {
    Linear {
        w: NodeId,
        b: Option<NodeId>,
    },
    StrictWnLinear {
        w: NodeId,
    },
    AffineWnLinear {
        w: NodeId,
        g: NodeId,
        b: NodeId,
    },
    Conv {
        k: NodeId,
        b: Option<NodeId>,
        stride: (usize, usize),
        pad: (usize, usize),
    },
    ConvTranspose {
        k: NodeId,
        b: Option<NodeId>,
        stride: (usize, usize),
        pad: (usize, usize),
    },
    WnConv {
        k: NodeId,
        affine: Option<(NodeId, NodeId)>,
        stride: (usize, usize),
        pad: (usize, usize),
    },
    WnConvTranspose {
        k: NodeId,
        affine: Option<(NodeId, NodeId)>,
        stride: (usize, usize),
        pad: (usize, usize),
    },
    WnFcFirst {
        w: NodeId,
        channels: usize,
        spatial: usize,
    },
    PRelu {
        s: NodeId,
    },
    TPRelu {
        a: NodeId,
        s: NodeId,
    },
    BatchNorm {
        g: NodeId,
        b: NodeId,
        running_mean: Tensor,
        running_var: Tensor,
        eps: f64,
        mean_only: bool,
    },
    Sigmoid,
    AvgPool {
        k: usize,
    },
    NearestUpscale {
        factor: usize,
    },
    Reshape {
        shape: Vec<usize>,
    },
    ResBlock {
        shortcut: Vec<StagedLayer>,
        residue: Vec<StagedLayer>,
        combine: StagedCombine,
        post: Box<StagedLayer>,
    },
}

enum StagedCombine {
    Sum,
    WnAdd { w1: NodeId, w2: NodeId },
}

fn stage_layer(
    layer: &Layer,
    path: &str,
    tape: &mut Tape,
    params: &mut Vec<StagedParam>,
) -> StagedLayer {
    let put = |tape: &mut Tape, params: &mut Vec<StagedParam>, suffix: &str, kind, t: &Tensor| {
        let id = tape.leaf(t.clone());
        params.push(StagedParam {
            path: format!("{path}.{suffix}"),
            kind,
            id,
        });
        id
    };
    use ParamKind::*;
    match layer {
        Layer::Linear(l) => StagedLayer::Linear {
            w: put(tape, params, "weight", Weight, &l.weight),
            b: l.bias.as_ref().map(|b| put(tape, params, "bias", Bias, b)),
        },
        Layer::StrictWnLinear(l) => StagedLayer::StrictWnLinear {
            w: put(tape, params, "weight", Weight, &l.weight),
        },
        Layer::AffineWnLinear(l) => StagedLayer::AffineWnLinear {
            w: put(tape, params, "weight", Weight, &l.weight),
            g: put(tape, params, "gamma", Gamma, &l.gamma),
            b: put(tape, params, "beta", Beta, &l.beta),
        },
        Layer::Conv(l) => StagedLayer::Conv {
            k: put(tape, params, "kernel", Weight, &l.kernel),
            b: l.bias.as_ref().map(|b| put(tape, params, "bias", Bias, b)),
            stride: l.stride,
            pad: l.pad,
        },
        Layer::ConvTranspose(l) => StagedLayer::ConvTranspose {
            k: put(tape, params, "kernel", Weight, &l.kernel),
            b: l.bias.as_ref().map(|b| put(tape, params, "bias", Bias, b)),
            stride: l.stride,
            pad: l.pad,
        },
        Layer::WnConv(l) => StagedLayer::WnConv {
            k: put(tape, params, "kernel", Weight, &l.kernel),
            affine: l.affine.as_ref().map(|(g, b)| {
                (
                    put(tape, params, "gamma", Gamma, g),
                    put(tape, params, "beta", Beta, b),
                )
            }),
            stride: l.stride,
            pad: l.pad,
        },
        Layer::WnConvTranspose(l) => StagedLayer::WnConvTranspose {
            k: put(tape, params, "kernel", Weight, &l.kernel),
            affine: l.affine.as_ref().map(|(g, b)| {
                (
                    put(tape, params, "gamma", Gamma, g),
                    put(tape, params, "beta", Beta, b),
                )
            }),
            stride: l.stride,
            pad: l.pad,
        },
        Layer::WnFcFirst {
            inner,
            channels,
            spatial,
        } => StagedLayer::WnFcFirst {
            w: put(tape, params, "weight", Weight, &inner.weight),
            channels: *channels,
            spatial: *spatial,
        },
        Layer::PRelu(l) => StagedLayer::PRelu {
            s: put(tape, params, "slope", Slope, &l.slope),
        },
        Layer::TPRelu(l) => StagedLayer::TPRelu {
            a: put(tape, params, "alpha", Alpha, &l.alpha),
            s: put(tape, params, "slope", Slope, &l.slope),
        },
        Layer::BatchNorm(bn) => StagedLayer::BatchNorm {
            g: put(tape, params, "gamma", Gamma, &bn.gamma),
            b: put(tape, params, "beta", Beta, &bn.beta),
            running_mean: bn.running_mean.clone(),
            running_var: bn.running_var.clone(),
            eps: bn.eps,
            mean_only: bn.mean_only,
        },
        Layer::Sigmoid => StagedLayer::Sigmoid,
        Layer::AvgPool { k } => StagedLayer::AvgPool { k: *k },
        Layer::NearestUpscale { factor } => StagedLayer::NearestUpscale { factor: *factor },
        Layer::Reshape { shape } => StagedLayer::Reshape {
            shape: shape.clone(),
        },
        Layer::ResBlock {
            shortcut,
            residue,
            combine,
            post,
        } => StagedLayer::ResBlock {
            shortcut: shortcut
                .iter()
                .enumerate()
                .map(|(i, l)| stage_layer(l, &format!("{path}.shortcut{i}"), tape, params))
                .collect(),
            residue: residue
                .iter()
                .enumerate()
                .map(|(i, l)| stage_layer(l, &format!("{path}.residue{i}"), tape, params))
                .collect(),
            combine: match combine {
                CombineLayer::Sum => StagedCombine::Sum,
                CombineLayer::WnAdd(add) => StagedCombine::WnAdd {
                    w1: put(tape, params, "add.w1", AddWeight, &add.w1),
                    w2: put(tape, params, "add.w2", AddWeight, &add.w2),
                },
            },
            post: Box::new(stage_layer(post, &format!("{path}.post"), tape, params)),
        },
    }
}

/// Per-forward bookkeeping: batch-normalization statistics (in traversal
/// order, one entry per BN layer per training-mode forward) and a
/// forward-call counter used to verify the separate-batch rule.
#[derive(Debug, Default)]
pub struct ForwardCtx {
    pub bn_stats: Vec<layers::BnBatchStats>,
    pub forward_calls: u32,
}

/// Output of one staged forward pass: the network output and, when the
/// network ends in a sigmoid, the pre-sigmoid logits (otherwise the same
/// node).
#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    pub out: NodeId,
    pub logits: NodeId,
}

pub struct StagedNet<'n> {
    net: &'n Network,
    layers: Vec<StagedLayer>,
    pub params: Vec<StagedParam>,
}

impl<'n> StagedNet<'n> {
    pub fn network(&self) -> &Network {
        self.net
    }

    /// Runs the network on a batch. The parameters staged at construction
    /// are shared across calls, so gradients from several passes
    /// accumulate onto the same leaves.
    pub fn forward(
        &self,
        tape: &mut Tape,
        x: NodeId,
        mode: Mode,
        ctx: &mut ForwardCtx,
    ) -> Result<ForwardOutput> {
        ctx.forward_calls += 1;
        let mut cur = x;
        let mut logits = x;
        for (i, layer) in self.layers.iter().enumerate() {
            let is_last = i + 1 == self.layers.len();
            if is_last {
                if let StagedLayer::Sigmoid = layer {
                    logits = cur;
                }
            }
            cur = forward_layer(layer, tape, cur, mode, ctx)?;
        }
        if !matches!(self.layers.last(), Some(StagedLayer::Sigmoid)) {
            logits = cur;
        }
        Ok(ForwardOutput { out: cur, logits })
    }
}

fn forward_layer(
    layer: &StagedLayer,
    tape: &mut Tape,
    x: NodeId,
    mode: Mode,
    ctx: &mut ForwardCtx,
) -> Result<NodeId> {
    match layer {
        StagedLayer::Linear { w, b } => layers::linear(tape, *w, *b, x),
        StagedLayer::StrictWnLinear { w } => {
            layers::strict_wn_linear(tape, *w, x, layers::WN_EPS)
        }
        StagedLayer::AffineWnLinear { w, g, b } => {
            layers::affine_wn_linear(tape, *w, *g, *b, x, layers::WN_EPS)
        }
        StagedLayer::Conv { k, b, stride, pad } => {
            let y = tape.conv2d(x, *k, *stride, *pad)?;
            match b {
                Some(b) => tape.add_channel(y, *b, 1),
                None => Ok(y),
            }
        }
        StagedLayer::ConvTranspose { k, b, stride, pad } => {
            let y = tape.conv2d_transposed(x, *k, *stride, *pad)?;
            match b {
                Some(b) => tape.add_channel(y, *b, 1),
                None => Ok(y),
            }
        }
        StagedLayer::WnConv {
            k,
            affine,
            stride,
            pad,
        } => {
            let y = layers::strict_wn_conv2d(tape, *k, x, *stride, *pad, layers::WN_EPS)?;
            match affine {
                Some((g, b)) => layers::channel_affine(tape, y, *g, *b),
                None => Ok(y),
            }
        }
        StagedLayer::WnConvTranspose {
            k,
            affine,
            stride,
            pad,
        } => {
            let y =
                layers::strict_wn_conv_transpose2d(tape, *k, x, *stride, *pad, layers::WN_EPS)?;
            match affine {
                Some((g, b)) => layers::channel_affine(tape, y, *g, *b),
                None => Ok(y),
            }
        }
        StagedLayer::WnFcFirst {
            w,
            channels,
            spatial,
        } => layers::wn_fc_first(tape, *w, x, *channels, *spatial, layers::WN_EPS),
        StagedLayer::PRelu { s } => layers::prelu(tape, *s, x, 1),
        StagedLayer::TPRelu { a, s } => layers::tprelu(tape, *a, *s, x, 1),
        StagedLayer::BatchNorm {
            g,
            b,
            running_mean,
            running_var,
            eps,
            mean_only,
        } => match mode {
            Mode::Train => {
                let (y, stats) = layers::batchnorm_train(tape, *g, *b, x, *eps, *mean_only)?;
                ctx.bn_stats.push(stats);
                Ok(y)
            }
            Mode::Inference => layers::batchnorm_infer(
                tape,
                *g,
                *b,
                running_mean,
                running_var,
                x,
                *eps,
                *mean_only,
            ),
        },
        StagedLayer::Sigmoid => tape.sigmoid(x),
        StagedLayer::AvgPool { k } => tape.avg_pool2d(x, *k),
        StagedLayer::NearestUpscale { factor } => tape.nearest_upscale2d(x, *factor),
        StagedLayer::Reshape { shape } => {
            let batch = tape.value(x).shape()[0];
            let mut full = vec![batch];
            full.extend_from_slice(shape);
            tape.reshape(x, full)
        }
        StagedLayer::ResBlock {
            shortcut,
            residue,
            combine,
            post,
        } => {
            let mut s = x;
            for l in shortcut {
                s = forward_layer(l, tape, s, mode, ctx)?;
            }
            let mut r = x;
            for l in residue {
                r = forward_layer(l, tape, r, mode, ctx)?;
            }
            let combined = match combine {
                StagedCombine::Sum => tape.add(s, r)?,
                StagedCombine::WnAdd { w1, w2 } => {
                    layers::wn_add(tape, *w1, *w2, s, r, 1, layers::WN_EPS)?
                }
            };
            forward_layer(post, tape, combined, mode, ctx)
        }
    }
}
