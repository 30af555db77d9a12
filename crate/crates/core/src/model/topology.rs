use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{InputSpec, LayerGeometry, Padding, Topology};
use crate::error::{Error, Result};

/// Positive rational width multiplier σ, kept in lowest terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Scale {
    pub num: u64,
    pub den: u64,
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

impl Scale {
    pub const ONE: Scale = Scale { num: 1, den: 1 };

    pub fn new(num: u64, den: u64) -> Result<Self> {
        if num == 0 || den == 0 {
            return Err(Error::InvalidScale(format!("{num}/{den} is not positive")));
        }
        let g = gcd(num, den);
        Ok(Self {
            num: num / g,
            den: den / g,
        })
    }

    /// `base·σ`, or an error when it is not a whole channel count.
    pub fn apply(&self, base: usize) -> Result<usize> {
        let scaled = base as u64 * self.num;
        if scaled % self.den != 0 {
            return Err(Error::InvalidScale(format!(
                "non-integral channel count: {base}·{self} = {}",
                scaled as f64 / self.den as f64
            )));
        }
        Ok((scaled / self.den) as usize)
    }

    pub fn as_f64(&self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.den == 1 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

impl FromStr for Scale {
    type Err = Error;

    /// Accepts `2`, `1/4`, `0.25`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidScale(format!("cannot parse `{s}` as a scale factor"));
        let s = s.trim();
        if let Some((n, d)) = s.split_once('/') {
            let n = n.trim().parse().map_err(|_| bad())?;
            let d = d.trim().parse().map_err(|_| bad())?;
            return Scale::new(n, d);
        }
        let (int, frac) = s.split_once('.').unwrap_or((s, ""));
        if frac.len() > 12 || (int.is_empty() && frac.is_empty()) {
            return Err(bad());
        }
        let digits = |t: &str| t.is_empty() || t.bytes().all(|b| b.is_ascii_digit());
        if !digits(int) || !digits(frac) {
            return Err(bad());
        }
        let den = 10u64.pow(frac.len() as u32);
        let int: u64 = if int.is_empty() { 0 } else { int.parse().map_err(|_| bad())? };
        let frac: u64 = if frac.is_empty() { 0 } else { frac.parse().map_err(|_| bad())? };
        Scale::new(int * den + frac, den)
    }
}

const CONV_WIDTHS: [usize; 6] = [128, 128, 256, 256, 512, 512];
const FC_WIDTHS: [usize; 2] = [1024, 1024];
const CLASSES: usize = 10;

/// The VGG-style cnn(σ) family: three (conv, conv, pool) groups and three
/// fully-connected layers, all widths scaled by σ except the 10-way head.
///
/// Without padding each conv shrinks the map by two; a pool that would see a
/// 1x1 map is dropped (32 → 30, 28 | 14 | 12, 10 | 5 | 3, 1).
/// `ZeroOracleOnly` padding is accepted here; only the oracle can run it.
pub fn build_topology(sigma: Scale, padding: Padding) -> Result<Topology> {
    let input = InputSpec::CIFAR;
    let mut layers = Vec::new();
    let mut dim = input.dim;
    let mut channels = input.channels;
    for (i, &base) in CONV_WIDTHS.iter().enumerate() {
        let out = sigma.apply(base)?;
        let g = LayerGeometry::conv3x3(channels, out, dim, padding);
        if dim + 2 * padding.border() < 3 {
            return Err(Error::Geometry(format!("feature map collapsed before conv {i}")));
        }
        layers.push(g);
        dim = g.ofm_dim;
        channels = out;
        if i % 2 == 1 && dim >= 2 {
            let p = LayerGeometry::maxpool2x2(channels, dim);
            if dim % 2 != 0 {
                return Err(Error::Geometry(format!("pool input {dim} is odd")));
            }
            layers.push(p);
            dim = p.ofm_dim;
        }
    }
    let mut inputs = dim * dim * channels;
    for &base in &FC_WIDTHS {
        let out = sigma.apply(base)?;
        layers.push(LayerGeometry::fully_connected(inputs, out));
        inputs = out;
    }
    layers.push(LayerGeometry::fully_connected(inputs, CLASSES));

    let pad_name = match padding {
        Padding::None => "nopad",
        Padding::NegOne => "neg1",
        Padding::ZeroOracleOnly => "zero",
    };
    let topo = Topology {
        name: format!("cnn({sigma})-{pad_name}"),
        sigma,
        padding,
        layers,
        input,
        classes: CLASSES,
    };
    topo.validate()?;
    Ok(topo)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LayerKind;

    fn s(v: &str) -> Scale {
        v.parse().unwrap()
    }

    #[test]
    fn parse_scales() {
        assert_eq!(s("0.25"), Scale { num: 1, den: 4 });
        assert_eq!(s("1/2"), Scale { num: 1, den: 2 });
        assert_eq!(s("2"), Scale { num: 2, den: 1 });
        assert_eq!(s("0.3"), Scale { num: 3, den: 10 });
        assert!("abc".parse::<Scale>().is_err());
        assert!("0".parse::<Scale>().is_err());
        assert!("-1".parse::<Scale>().is_err());
    }

    #[test]
    fn cnn1_padded_shape() {
        let t = build_topology(Scale::ONE, Padding::NegOne).unwrap();
        assert_eq!(t.mvu_count(), 9);
        let pools = t.layers.iter().filter(|g| g.kind == LayerKind::Maxpool2x2).count();
        assert_eq!(pools, 3);
        let first = t.layers[0];
        assert_eq!((first.in_channels, first.out_channels), (3, 128));
        let fc: Vec<usize> = t
            .layers
            .iter()
            .filter(|g| g.kind == LayerKind::FullyConnected)
            .map(|g| g.out_channels)
            .collect();
        assert_eq!(fc, vec![1024, 1024, 10]);
        let fc1 = t.layers.iter().find(|g| g.kind == LayerKind::FullyConnected).unwrap();
        assert_eq!(fc1.in_channels, 4 * 4 * 512);
    }

    #[test]
    fn cnn_quarter_widths() {
        let t = build_topology(s("1/4"), Padding::NegOne).unwrap();
        assert_eq!(t.layers[0].out_channels, 32);
        let fc: Vec<usize> = t
            .layers
            .iter()
            .filter(|g| g.kind == LayerKind::FullyConnected)
            .map(|g| g.out_channels)
            .collect();
        assert_eq!(fc, vec![256, 256, 10]);
    }

    #[test]
    fn unpadded_dims() {
        let t = build_topology(Scale::ONE, Padding::None).unwrap();
        let dims: Vec<(LayerKind, usize)> = t
            .layers
            .iter()
            .filter(|g| g.kind != LayerKind::FullyConnected)
            .map(|g| (g.kind, g.ofm_dim))
            .collect();
        use LayerKind::*;
        assert_eq!(
            dims,
            vec![
                (Conv3x3, 30),
                (Conv3x3, 28),
                (Maxpool2x2, 14),
                (Conv3x3, 12),
                (Conv3x3, 10),
                (Maxpool2x2, 5),
                (Conv3x3, 3),
                (Conv3x3, 1),
            ]
        );
        let fc1 = t.layers.iter().find(|g| g.kind == FullyConnected).unwrap();
        assert_eq!(fc1.in_channels, 512);
    }

    #[test]
    fn non_integral_scale() {
        let err = build_topology(s("0.3"), Padding::NegOne).unwrap_err();
        assert!(err.to_string().contains("non-integral channel count"));
    }

    #[test]
    fn synapse_counts_match_geometry() {
        for sigma in ["1/4", "1/2", "1"] {
            let t = build_topology(s(sigma), Padding::NegOne).unwrap();
            for (_, g) in t.mvu_layers() {
                match g.kind {
                    LayerKind::Conv3x3 => assert_eq!(g.synapses_per_neuron, 9 * g.in_channels),
                    _ => assert_eq!(g.synapses_per_neuron, g.in_channels),
                }
            }
        }
    }
}
