use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::layers::*;
use super::tensor::{Scalar, Tensor4};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    /// One linear output channel.
    Regression,
    /// Softmax over cell / gutta / other.
    Classification3,
}

impl Head {
    pub fn out_channels(self) -> usize {
        match self {
            Head::Regression => 1,
            Head::Classification3 => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UNetConfig {
    pub levels: usize,
    pub base_channels: usize,
    pub leaky_slope: f64,
    pub head: Head,
    /// Instance normalization after every 3×3 convolution.
    pub instance_norm: bool,
    pub seed: u64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            levels: 5,
            base_channels: 16,
            leaky_slope: 0.1,
            head: Head::Regression,
            instance_norm: true,
            seed: 0,
        }
    }
}

impl UNetConfig {
    /// The classification baseline: same layout, no normalization, plain ReLU,
    /// three-class softmax output.
    pub fn mask_baseline(levels: usize, base_channels: usize, seed: u64) -> Self {
        UNetConfig {
            levels,
            base_channels,
            leaky_slope: 0.0,
            head: Head::Classification3,
            instance_norm: false,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 {
            return Err(Error::Config(format!("levels must be >= 2, got {}", self.levels)));
        }
        if self.levels > 12 {
            return Err(Error::Config(format!("levels {} is too deep", self.levels)));
        }
        if self.base_channels == 0 {
            return Err(Error::Config("base_channels must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.leaky_slope) {
            return Err(Error::Config(format!("leaky_slope {} outside [0, 1)", self.leaky_slope)));
        }
        Ok(())
    }

    /// Feature channels at `level` (0 = full resolution).
    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Input sides must be multiples of this.
    pub fn input_multiple(&self) -> usize {
        1 << (self.levels - 1)
    }

    /// Fingerprint of everything that shapes the parameter tensors and
    /// their meaning; the init seed is excluded.
    pub fn architecture_hash(&self) -> u64 {
        let desc = format!(
            "levels={};base={};slope={:016x};head={:?};norm={}",
            self.levels,
            self.base_channels,
            self.leaky_slope.to_bits(),
            self.head,
            self.instance_norm
        );
        fnv1a(desc.as_bytes())
    }
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<S> {
    pub name: String,
    pub dims: Vec<usize>,
    pub value: Vec<S>,
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    weight: usize,
    bias: Option<usize>,
    cout: usize,
    k: usize,
}

#[derive(Debug, Clone, Copy)]
struct UpConv {
    weight: usize,
    bias: usize,
    cout: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    down: Vec<[Conv; 2]>,
    bottom: [Conv; 2],
    projection: Option<Conv>,
    /// Indexed by level; executed from deepest to shallowest.
    up: Vec<(UpConv, [Conv; 2])>,
    head: Conv,
}

/// Activations kept by a training forward pass for the backward pass.
#[derive(Debug, Default)]
pub struct Tape<S> {
    tensors: Vec<Tensor4<S>>,
    inv_std: Vec<Vec<S>>,
    argmax: Vec<Vec<u32>>,
}

impl<S> Tape<S> {
    pub fn new() -> Self {
        Tape { tensors: Vec::new(), inv_std: Vec::new(), argmax: Vec::new() }
    }

    fn tensor(&mut self) -> Tensor4<S> {
        self.tensors.pop().expect("tape out of sync")
    }
}

/// Encoder–decoder network with a residual bottleneck.
#[derive(Debug, Clone)]
pub struct Model<S> {
    config: UNetConfig,
    params: Vec<Param<S>>,
    layout: Layout,
}

struct Builder {
    params: Vec<Param<f64>>,
    rng: ChaCha8Rng,
}

impl Builder {
    fn push(&mut self, name: String, dims: Vec<usize>, value: Vec<f64>) -> usize {
        self.params.push(Param { name, dims, value });
        self.params.len() - 1
    }

    fn normal(&mut self, len: usize, std: f64) -> Vec<f64> {
        let dist = Normal::new(0.0, std).expect("finite std");
        (0..len).map(|_| dist.sample(&mut self.rng)).collect()
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, bias: bool, gain: f64) -> Conv {
        let fan_in = cin * k * k;
        let w = self.normal(cout * fan_in, (gain / fan_in as f64).sqrt());
        let weight = self.push(format!("{name}.weight"), vec![cout, cin, k, k], w);
        let bias = bias.then(|| self.push(format!("{name}.bias"), vec![cout], vec![0.0; cout]));
        Conv { weight, bias, cout, k }
    }

    fn upconv(&mut self, name: &str, cin: usize, cout: usize) -> UpConv {
        // nearest-neighbour upsampling of the channel-group average
        let mut w = vec![0.0; cin * cout * 4];
        let share = cin.div_ceil(cout) as f64;
        for i in 0..cin {
            for d in 0..4 {
                w[i * cout * 4 + (i % cout) * 4 + d] = 1.0 / share;
            }
        }
        let weight = self.push(format!("{name}.weight"), vec![cin, cout, 2, 2], w);
        let bias = self.push(format!("{name}.bias"), vec![cout], vec![0.0; cout]);
        UpConv { weight, bias, cout }
    }
}

impl<S: Scalar> Model<S> {
    pub fn build(config: &UNetConfig) -> Result<Self> {
        config.validate()?;
        let mut b = Builder {
            params: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
        };
        let gain = 2.0 / (1.0 + config.leaky_slope * config.leaky_slope);
        // a bias in front of instance norm would be cancelled by it
        let bias = !config.instance_norm;
        let last = config.levels - 1;
        let mut down = Vec::new();
        let mut cin = 1;
        for l in 0..last {
            let c = config.channels(l);
            down.push([
                b.conv(&format!("down{l}.conv_a"), cin, c, 3, bias, gain),
                b.conv(&format!("down{l}.conv_b"), c, c, 3, bias, gain),
            ]);
            cin = c;
        }
        let c = config.channels(last);
        let bottom = [
            b.conv("bottleneck.conv_a", cin, c, 3, bias, gain),
            b.conv("bottleneck.conv_b", c, c, 3, bias, gain),
        ];
        let projection = (cin != c).then(|| b.conv("bottleneck.projection", cin, c, 1, false, 1.0));
        let mut up = Vec::new();
        for l in 0..last {
            let c = config.channels(l);
            let deconv = b.upconv(&format!("up{l}.deconv"), config.channels(l + 1), c);
            up.push((
                deconv,
                [
                    b.conv(&format!("up{l}.conv_a"), 2 * c, c, 3, bias, gain),
                    b.conv(&format!("up{l}.conv_b"), c, c, 3, bias, gain),
                ],
            ));
        }
        let head = b.conv("head", config.channels(0), config.head.out_channels(), 1, true, 1.0);
        let params = b
            .params
            .into_iter()
            .map(|p| Param {
                name: p.name,
                dims: p.dims,
                value: p.value.into_iter().map(S::of).collect(),
            })
            .collect();
        Ok(Model {
            config: config.clone(),
            params,
            layout: Layout { down, bottom, projection, up, head },
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param<S>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<S>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Zero-filled gradient buffers shaped like the parameters.
    pub fn zero_grads(&self) -> Vec<Vec<S>> {
        self.params.iter().map(|p| vec![S::zero(); p.value.len()]).collect()
    }

    /// Same network at another precision.
    pub fn cast<T: Scalar>(&self) -> Model<T> {
        Model {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    dims: p.dims.clone(),
                    value: p.value.iter().map(|v| T::of(v.to_f64().unwrap_or(f64::NAN))).collect(),
                })
                .collect(),
            layout: self.layout.clone(),
        }
    }

    pub fn check_input(&self, x: &Tensor4<S>) -> Result<()> {
        let m = self.config.input_multiple();
        if x.channels() != 1 {
            return Err(Error::DimensionMismatch(format!("expected 1 input channel, got {}", x.channels())));
        }
        if !x.height().is_multiple_of(m) || !x.width().is_multiple_of(m) {
            return Err(Error::DimensionMismatch(format!(
                "input {}x{} is not a multiple of {m}; pad it first",
                x.width(),
                x.height()
            )));
        }
        Ok(())
    }

    /// Network output: the regression map or per-class probabilities.
    pub fn forward(&self, x: &Tensor4<S>) -> Result<Tensor4<S>> {
        self.check_input(x)?;
        let mut out = self.forward_impl(x, None);
        if self.config.head == Head::Classification3 {
            softmax_channels(&mut out);
        }
        Ok(out)
    }

    /// Forward pass recording activations; returns the pre-softmax head output.
    pub fn forward_train(&self, x: &Tensor4<S>, tape: &mut Tape<S>) -> Result<Tensor4<S>> {
        self.check_input(x)?;
        Ok(self.forward_impl(x, Some(tape)))
    }

    fn conv(&self, c: &Conv, x: &Tensor4<S>) -> Tensor4<S> {
        conv_forward(
            x,
            &self.params[c.weight].value,
            c.bias.map(|b| self.params[b].value.as_slice()),
            c.cout,
            c.k,
        )
    }

    fn slope(&self) -> S {
        S::of(self.config.leaky_slope)
    }

    fn block(&self, c: &Conv, x: &Tensor4<S>, tape: &mut Option<&mut Tape<S>>) -> Tensor4<S> {
        let mut z = self.conv(c, x);
        if let Some(t) = tape.as_deref_mut() {
            t.tensors.push(x.clone());
        }
        if self.config.instance_norm {
            let (n, inv) = instance_norm_forward(&z);
            z = n;
            if let Some(t) = tape.as_deref_mut() {
                t.tensors.push(z.clone());
                t.inv_std.push(inv);
            }
        }
        leaky_forward(&mut z, self.slope());
        if let Some(t) = tape.as_deref_mut() {
            t.tensors.push(z.clone());
        }
        z
    }

    fn block_backward(&self, c: &Conv, tape: &mut Tape<S>, mut dy: Tensor4<S>, grads: &mut [Vec<S>], need_dx: bool) -> Option<Tensor4<S>> {
        let out = tape.tensor();
        leaky_backward(&out, &mut dy, self.slope());
        if self.config.instance_norm {
            let inv = tape.inv_std.pop().expect("tape out of sync");
            let xhat = tape.tensor();
            dy = instance_norm_backward(&xhat, &inv, &dy);
        }
        let x = tape.tensor();
        self.conv_grad(c, &x, &dy, grads, need_dx)
    }

    fn conv_grad(&self, c: &Conv, x: &Tensor4<S>, dy: &Tensor4<S>, grads: &mut [Vec<S>], need_dx: bool) -> Option<Tensor4<S>> {
        let mut dw = std::mem::take(&mut grads[c.weight]);
        let dx = match c.bias {
            Some(b) => {
                let mut db = std::mem::take(&mut grads[b]);
                let dx = conv_backward(x, &self.params[c.weight].value, dy, c.k, &mut dw, Some(&mut db), need_dx);
                grads[b] = db;
                dx
            }
            None => conv_backward(x, &self.params[c.weight].value, dy, c.k, &mut dw, None, need_dx),
        };
        grads[c.weight] = dw;
        dx
    }

    fn forward_impl(&self, x: &Tensor4<S>, mut tape: Option<&mut Tape<S>>) -> Tensor4<S> {
        let lay = &self.layout;
        let mut skips = Vec::with_capacity(lay.down.len());
        let mut h = x.clone();
        for [a, b] in &lay.down {
            h = self.block(a, &h, &mut tape);
            h = self.block(b, &h, &mut tape);
            let (pooled, arg) = maxpool_forward(&h);
            if let Some(t) = tape.as_deref_mut() {
                t.argmax.push(arg);
            }
            skips.push(h);
            h = pooled;
        }
        let xin = h;
        h = self.block(&lay.bottom[0], &xin, &mut tape);
        h = self.block(&lay.bottom[1], &h, &mut tape);
        let shortcut = match &lay.projection {
            Some(p) => self.conv(p, &xin),
            None => xin.clone(),
        };
        for (v, s) in h.values_mut().iter_mut().zip(shortcut.values()) {
            *v += *s;
        }
        if let Some(t) = tape.as_deref_mut() {
            t.tensors.push(xin);
        }
        for (l, (deconv, [a, b])) in lay.up.iter().enumerate().rev() {
            let u = upconv_forward(&h, &self.params[deconv.weight].value, &self.params[deconv.bias].value, deconv.cout);
            if let Some(t) = tape.as_deref_mut() {
                t.tensors.push(h);
            }
            let cat = concat(&u, &skips[l]);
            h = self.block(a, &cat, &mut tape);
            h = self.block(b, &h, &mut tape);
        }
        let out = self.conv(&lay.head, &h);
        if let Some(t) = tape.as_mut() {
            t.tensors.push(h);
        }
        out
    }

    /// Parameter gradients given the gradient of the loss with respect to
    /// the pre-softmax head output of the matching [`Model::forward_train`].
    pub fn backward(&self, mut tape: Tape<S>, d_out: &Tensor4<S>) -> Vec<Vec<S>> {
        let lay = &self.layout;
        let mut grads = self.zero_grads();
        let h = tape.tensor();
        let mut dh = self.conv_grad(&lay.head, &h, d_out, &mut grads, true).expect("dx requested");
        let mut dskips = Vec::with_capacity(lay.up.len());
        for (deconv, [a, b]) in &lay.up {
            let d = self.block_backward(b, &mut tape, dh, &mut grads, true).expect("dx requested");
            let dcat = self.block_backward(a, &mut tape, d, &mut grads, true).expect("dx requested");
            let (du, dskip) = split_channels(&dcat, deconv.cout);
            let hin = tape.tensor();
            let mut dw = std::mem::take(&mut grads[deconv.weight]);
            let mut db = std::mem::take(&mut grads[deconv.bias]);
            dh = upconv_backward(&hin, &self.params[deconv.weight].value, &du, &mut dw, &mut db);
            grads[deconv.weight] = dw;
            grads[deconv.bias] = db;
            dskips.push(dskip);
        }
        let xin = tape.tensor();
        let d_short = match &lay.projection {
            Some(p) => self.conv_grad(p, &xin, &dh, &mut grads, true).expect("dx requested"),
            None => dh.clone(),
        };
        let d = self.block_backward(&lay.bottom[1], &mut tape, dh, &mut grads, true).expect("dx requested");
        let mut dx = self.block_backward(&lay.bottom[0], &mut tape, d, &mut grads, true).expect("dx requested");
        for (g, s) in dx.values_mut().iter_mut().zip(d_short.values()) {
            *g += *s;
        }
        for (l, [a, b]) in lay.down.iter().enumerate().rev() {
            let arg = tape.argmax.pop().expect("tape out of sync");
            let dskip = &dskips[l];
            let mut dpre = maxpool_backward(&arg, &dx, dskip.height(), dskip.width());
            for (g, s) in dpre.values_mut().iter_mut().zip(dskip.values()) {
                *g += *s;
            }
            let d = self.block_backward(b, &mut tape, dpre, &mut grads, true).expect("dx requested");
            match self.block_backward(a, &mut tape, d, &mut grads, l > 0) {
                Some(next) => dx = next,
                None => break,
            }
        }
        debug_assert!(tape.tensors.is_empty() && tape.argmax.is_empty() && tape.inv_std.is_empty());
        grads
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encoder_widths_double() {
        let m = Model::<f32>::build(&UNetConfig::default()).unwrap();
        let widths: Vec<usize> = m
            .params()
            .iter()
            .filter(|p| p.name.starts_with("down") || p.name.starts_with("bottleneck"))
            .filter(|p| p.name.ends_with("conv_b.weight"))
            .map(|p| p.dims[0])
            .collect();
        assert_eq!(widths, vec![16, 32, 64, 128, 256]);
        assert!(m.params().iter().all(|p| p.value.len() == p.dims.iter().product::<usize>()));
    }

    #[test]
    fn head_channels() {
        let x = Tensor4::<f32>::zeros(1, 1, 16, 16);
        let reg = Model::<f32>::build(&UNetConfig { levels: 3, base_channels: 2, ..Default::default() }).unwrap();
        assert_eq!(reg.forward(&x).unwrap().channels(), 1);
        let cls = Model::<f32>::build(&UNetConfig::mask_baseline(3, 2, 0)).unwrap();
        let p = cls.forward(&x).unwrap();
        assert_eq!(p.channels(), 3);
        assert!(p.values().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn zero_input_is_finite() {
        let m = Model::<f32>::build(&UNetConfig { base_channels: 4, ..Default::default() }).unwrap();
        let y = m.forward(&Tensor4::zeros(1, 1, 96, 96)).unwrap();
        assert_eq!(y.dims(), [1, 1, 96, 96]);
        assert!(y.values().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn rejects_indivisible_input() {
        let m = Model::<f32>::build(&UNetConfig { base_channels: 2, ..Default::default() }).unwrap();
        assert!(m.forward(&Tensor4::zeros(1, 1, 40, 48)).is_err());
        assert!(m.forward(&Tensor4::zeros(1, 2, 48, 48)).is_err());
    }

    #[test]
    fn invalid_configs() {
        assert!(Model::<f32>::build(&UNetConfig { levels: 1, ..Default::default() }).is_err());
        assert!(Model::<f32>::build(&UNetConfig { base_channels: 0, ..Default::default() }).is_err());
    }

    #[test]
    fn hash_ignores_seed_only() {
        let a = UNetConfig::default();
        assert_eq!(a.architecture_hash(), UNetConfig { seed: 9, ..a.clone() }.architecture_hash());
        assert_ne!(a.architecture_hash(), UNetConfig { levels: 4, ..a.clone() }.architecture_hash());
    }
}
