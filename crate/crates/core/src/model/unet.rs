use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::architecture::{ArchitectureSpec, ConvSpec};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, Dropout, MaxPool2, ParamSlot, Relu, Tensor, Upsample2};

const WEIGHTS_MAGIC: &[u8; 4] = b"LSGW";
const WEIGHTS_VERSION: u32 = 1;
pub const ARCHITECTURE_FILE: &str = "architecture.toml";
pub const WEIGHTS_FILE: &str = "weights.bin";

/// Images per inference pass in [`UNet::predict`].
const PREDICT_CHUNK: usize = 8;

/// Convolution → BN → activation → dropout.
#[derive(Debug, Clone)]
struct ConvUnit {
    conv: Conv2d,
    bn: Option<BatchNorm2d>,
    relu: Relu,
    dropout: Option<Dropout>,
}

impl ConvUnit {
    fn new(spec: &ConvSpec, rng: &mut ChaCha8Rng) -> Self {
        Self {
            conv: Conv2d::new(spec.in_channels, spec.out_channels, spec.kernel, rng),
            bn: spec.batch_norm.then(|| BatchNorm2d::new(spec.out_channels)),
            relu: Relu::default(),
            dropout: (spec.dropout > 0.0).then(|| Dropout::new(spec.dropout as f32)),
        }
    }

    fn forward(&mut self, x: Tensor, train: bool, rng: &mut ChaCha8Rng) -> Tensor {
        let mut h = self.conv.forward(x, train);
        if let Some(bn) = &mut self.bn {
            h = bn.forward(h, train);
        }
        h = self.relu.forward(h, train);
        if let Some(d) = &mut self.dropout {
            h = d.forward(h, train, rng);
        }
        h
    }

    fn backward(&mut self, mut d: Tensor) -> Option<Tensor> {
        if let Some(dr) = &mut self.dropout {
            d = dr.backward(d);
        }
        d = self.relu.backward(d);
        if let Some(bn) = &mut self.bn {
            d = bn.backward(d);
        }
        self.conv.backward(&d)
    }

    fn params<'a>(&'a mut self, out: &mut Vec<ParamSlot<'a>>) {
        self.conv.params(out);
        if let Some(bn) = &mut self.bn {
            bn.params(out);
        }
    }

    fn trainable<'a>(&'a self, out: &mut Vec<&'a [f32]>) {
        out.extend([&self.conv.weight[..], &self.conv.bias]);
        if let Some(bn) = &self.bn {
            out.extend([&bn.gamma[..], &bn.beta]);
        }
    }

    fn state<'a>(&'a self, out: &mut Vec<&'a [f32]>) {
        self.conv.state(out);
        if let Some(bn) = &self.bn {
            bn.state(out);
        }
    }

    fn state_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f32]>) {
        self.conv.state_mut(out);
        if let Some(bn) = &mut self.bn {
            bn.state_mut(out);
        }
    }

    fn clear_cache(&mut self) {
        self.conv.clear_cache();
        if let Some(bn) = &mut self.bn {
            bn.clear_cache();
        }
        self.relu.clear_cache();
        if let Some(d) = &mut self.dropout {
            d.clear_cache();
        }
    }
}

#[derive(Debug, Clone)]
struct Block {
    units: Vec<ConvUnit>,
}

impl Block {
    fn new(convs: &[ConvSpec], rng: &mut ChaCha8Rng) -> Self {
        Self {
            units: convs.iter().map(|c| ConvUnit::new(c, rng)).collect(),
        }
    }

    fn forward(&mut self, mut x: Tensor, train: bool, rng: &mut ChaCha8Rng) -> Tensor {
        for u in &mut self.units {
            x = u.forward(x, train, rng);
        }
        x
    }

    fn backward(&mut self, d: Tensor) -> Option<Tensor> {
        self.units.iter_mut().rev().try_fold(d, |d, u| u.backward(d))
    }
}

#[derive(Debug, Clone)]
struct DecoderStage {
    up: Upsample2,
    up_conv: Conv2d,
    up_relu: Relu,
    block: Block,
}

/// Trainable U-net instantiated from an [`ArchitectureSpec`].
#[derive(Debug, Clone)]
pub struct UNet {
    spec: ArchitectureSpec,
    encoders: Vec<Block>,
    pools: Vec<MaxPool2>,
    bottleneck: Block,
    decoders: Vec<DecoderStage>,
    head: Conv2d,
    probs: Option<Vec<f32>>,
    dropout_rng: ChaCha8Rng,
}

/// Builds a model with seeded He-uniform weights.
pub fn instantiate(spec: &ArchitectureSpec, seed: u64) -> Result<UNet> {
    UNet::new(spec, seed)
}

impl UNet {
    pub fn new(spec: &ArchitectureSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut encoders: Vec<Block> = spec
            .encoder_levels
            .iter()
            .map(|l| Block::new(&l.convs, &mut rng))
            .collect();
        encoders[0].units[0].conv.input_grad = false;
        let bottleneck = Block::new(&spec.bottleneck.convs, &mut rng);
        let decoders = spec
            .decoder_levels
            .iter()
            .map(|d| DecoderStage {
                up: Upsample2,
                up_conv: Conv2d::new(
                    d.up_conv.in_channels,
                    d.up_conv.out_channels,
                    d.up_conv.kernel,
                    &mut rng,
                ),
                up_relu: Relu::default(),
                block: Block::new(&d.convs, &mut rng),
            })
            .collect();
        let h = &spec.output_head;
        let head = Conv2d::new(h.in_channels, h.out_channels, h.kernel, &mut rng);
        Ok(Self {
            spec: spec.clone(),
            pools: vec![MaxPool2::default(); spec.pool_levels()],
            encoders,
            bottleneck,
            decoders,
            head,
            probs: None,
            dropout_rng: ChaCha8Rng::seed_from_u64(seed ^ 0xD50F_0E11),
        })
    }

    pub fn spec(&self) -> &ArchitectureSpec {
        &self.spec
    }

    pub fn input_size(&self) -> usize {
        self.spec.input_size
    }

    pub fn reseed_dropout(&mut self, seed: u64) {
        self.dropout_rng = ChaCha8Rng::seed_from_u64(seed);
    }

    /// Per-pixel lung probabilities for a `(1, N, S, S)` batch.
    ///
    /// In training mode every layer caches what [`UNet::backward`] needs.
    pub fn forward(&mut self, x: Tensor, train: bool) -> Result<Tensor> {
        let s = self.spec.input_size;
        if x.channels != 1 || x.height != s || x.width != s {
            return Err(Error::ShapeMismatch {
                left: x.shape().to_vec(),
                right: vec![1, x.batch, s, s],
            });
        }
        let rng = &mut self.dropout_rng;
        let mut h = x;
        let mut skips = Vec::with_capacity(self.encoders.len());
        for (block, pool) in self.encoders.iter_mut().zip(&mut self.pools) {
            h = block.forward(h, train, rng);
            let pooled = pool.forward(&h, train);
            skips.push(h);
            h = pooled;
        }
        h = self.bottleneck.forward(h, train, rng);
        for stage in &mut self.decoders {
            let up = stage.up.forward(&h);
            let u = stage.up_conv.forward(up, train);
            let u = stage.up_relu.forward(u, train);
            let skip = skips.pop().expect("one skip per decoder level");
            h = stage.block.forward(u.concat_channels(&skip), train, rng);
        }
        let mut out = self.head.forward(h, train);
        out.data.iter_mut().for_each(|z| *z = 1.0 / (1.0 + (-*z).exp()));
        self.probs = train.then(|| out.data.clone());
        Ok(out)
    }

    /// Back-propagates `d loss / d probability` through the network, leaving
    /// parameter gradients in place for [`UNet::params`].
    pub fn backward(&mut self, dprobs: &Tensor) {
        let probs = self.probs.take().expect("backward without a training forward pass");
        let mut dz = dprobs.clone();
        for (d, p) in dz.data.iter_mut().zip(&probs) {
            *d *= p * (1.0 - p);
        }
        let mut d = self.head.backward(&dz).expect("head input gradient");
        let mut dskips = Vec::with_capacity(self.decoders.len());
        for stage in self.decoders.iter_mut().rev() {
            let dcat = stage.block.backward(d).expect("decoder input gradient");
            let (du, dskip) = dcat.split_channels(stage.up_conv.out_channels);
            dskips.push(dskip);
            let du = stage.up_relu.backward(du);
            let du = stage.up_conv.backward(&du).expect("up-conv input gradient");
            d = stage.up.backward(&du);
        }
        d = self.bottleneck.backward(d).expect("bottleneck input gradient");
        for (block, pool) in self.encoders.iter_mut().zip(&mut self.pools).rev() {
            let mut dd = pool.backward(&d);
            dd.add_assign(&dskips.pop().expect("one skip gradient per level"));
            match block.backward(dd) {
                Some(next) => d = next,
                None => break,
            }
        }
    }

    /// Eval-mode probabilities for a list of images.
    pub fn predict(&mut self, images: &[ArrayView2<'_, f32>]) -> Result<Vec<Array2<f32>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(PREDICT_CHUNK) {
            let probs = self.forward(Tensor::from_images(chunk), false)?;
            out.extend(probs.to_images());
        }
        Ok(out)
    }

    /// Trainable vectors in a fixed order, each with its latest gradient.
    pub fn params(&mut self) -> Vec<ParamSlot<'_>> {
        let mut out = Vec::new();
        for b in self.encoders.iter_mut().chain(std::iter::once(&mut self.bottleneck)) {
            b.units.iter_mut().for_each(|u| u.params(&mut out));
        }
        for s in &mut self.decoders {
            s.up_conv.params(&mut out);
            s.block.units.iter_mut().for_each(|u| u.params(&mut out));
        }
        self.head.params(&mut out);
        out
    }

    fn trainable(&self) -> Vec<&[f32]> {
        let mut out = Vec::new();
        for b in self.encoders.iter().chain(std::iter::once(&self.bottleneck)) {
            b.units.iter().for_each(|u| u.trainable(&mut out));
        }
        for s in &self.decoders {
            out.extend([&s.up_conv.weight[..], &s.up_conv.bias]);
            s.block.units.iter().for_each(|u| u.trainable(&mut out));
        }
        out.extend([&self.head.weight[..], &self.head.bias]);
        out
    }

    /// Trainable scalars counted by walking the instantiated layers.
    pub fn trainable_parameter_count(&self) -> usize {
        self.trainable().iter().map(|v| v.len()).sum()
    }

    /// Every persistent vector: trainable parameters plus BN running statistics.
    pub fn state(&self) -> Vec<&[f32]> {
        let mut out = Vec::new();
        for b in self.encoders.iter().chain(std::iter::once(&self.bottleneck)) {
            b.units.iter().for_each(|u| u.state(&mut out));
        }
        for s in &self.decoders {
            s.up_conv.state(&mut out);
            s.block.units.iter().for_each(|u| u.state(&mut out));
        }
        self.head.state(&mut out);
        out
    }

    fn state_mut(&mut self) -> Vec<&mut [f32]> {
        let mut out = Vec::new();
        for b in self.encoders.iter_mut().chain(std::iter::once(&mut self.bottleneck)) {
            b.units.iter_mut().for_each(|u| u.state_mut(&mut out));
        }
        for s in &mut self.decoders {
            s.up_conv.state_mut(&mut out);
            s.block.units.iter_mut().for_each(|u| u.state_mut(&mut out));
        }
        self.head.state_mut(&mut out);
        out
    }

    pub fn snapshot(&self) -> Vec<Vec<f32>> {
        self.state().into_iter().map(<[f32]>::to_vec).collect()
    }

    pub fn restore(&mut self, snapshot: &[Vec<f32>]) -> Result<()> {
        let mut slots = self.state_mut();
        if slots.len() != snapshot.len() || slots.iter().zip(snapshot).any(|(a, b)| a.len() != b.len()) {
            return Err(Error::Architecture("snapshot does not match this model".into()));
        }
        for (dst, src) in slots.iter_mut().zip(snapshot) {
            dst.copy_from_slice(src);
        }
        Ok(())
    }

    /// Drops cached activations (e.g. after an aborted training step).
    pub fn clear_cache(&mut self) {
        for b in self.encoders.iter_mut().chain(std::iter::once(&mut self.bottleneck)) {
            b.units.iter_mut().for_each(ConvUnit::clear_cache);
        }
        self.pools.iter_mut().for_each(MaxPool2::clear_cache);
        for s in &mut self.decoders {
            s.up_conv.clear_cache();
            s.up_relu.clear_cache();
            s.block.units.iter_mut().for_each(ConvUnit::clear_cache);
        }
        self.head.clear_cache();
        self.probs = None;
    }

    /// Writes `architecture.toml` and `weights.bin` into `dir`.
    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let arch_path = dir.join(ARCHITECTURE_FILE);
        fs::write(&arch_path, self.spec.to_toml()?).map_err(|e| Error::io(&arch_path, e))?;
        let state = self.state();
        let mut buf = Vec::with_capacity(16 + state.iter().map(|v| 8 + 4 * v.len()).sum::<usize>());
        buf.extend_from_slice(WEIGHTS_MAGIC);
        buf.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
        buf.extend_from_slice(&(state.len() as u64).to_le_bytes());
        for v in &state {
            buf.extend_from_slice(&(v.len() as u64).to_le_bytes());
            for x in v.iter() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        let weights_path = dir.join(WEIGHTS_FILE);
        let mut f = fs::File::create(&weights_path).map_err(|e| Error::io(&weights_path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(&weights_path, e))
    }

    pub fn load_checkpoint(dir: &Path) -> Result<Self> {
        let arch_path = dir.join(ARCHITECTURE_FILE);
        let text = fs::read_to_string(&arch_path).map_err(|e| Error::io(&arch_path, e))?;
        let spec = ArchitectureSpec::from_toml(&text)?;
        let weights_path = dir.join(WEIGHTS_FILE);
        let mut bytes = Vec::new();
        fs::File::open(&weights_path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(&weights_path, e))?;
        let bad = |message: &str| Error::Checkpoint {
            path: weights_path.clone(),
            message: message.to_owned(),
        };
        let mut cursor = bytes.as_slice();
        let mut take = |n: usize| -> Result<&[u8]> {
            if cursor.len() < n {
                return Err(bad("truncated weights file"));
            }
            let (head, tail) = cursor.split_at(n);
            cursor = tail;
            Ok(head)
        };
        if take(4)? != WEIGHTS_MAGIC {
            return Err(bad("not a weights file"));
        }
        let version = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes"));
        if version != WEIGHTS_VERSION {
            return Err(bad("unsupported weights version"));
        }
        let count = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
        let mut snapshot = Vec::with_capacity(count);
        for _ in 0..count {
            let len = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
            let raw = take(len * 4)?;
            snapshot.push(
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect::<Vec<f32>>(),
            );
        }
        let mut model = UNet::new(&spec, 0)?;
        model
            .restore(&snapshot)
            .map_err(|_| bad("weights do not match the architecture"))?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_architecture, parameter_count, HyperParams};
    use rand::Rng;

    fn small_hp(n: u32, t: u32, f: u32, bn: u8) -> HyperParams {
        HyperParams {
            pool_levels: n,
            doublings: t,
            base_features: f,
            batch_norm: bn,
            dropout: 0.0,
            ..HyperParams::baseline()
        }
    }

    fn random_batch(batch: usize, size: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Tensor::zeros(1, batch, size, size);
        t.data.iter_mut().for_each(|v| *v = rng.random());
        t
    }

    #[test]
    fn output_shape_and_range() {
        let spec = build_architecture(&small_hp(3, 2, 4, 1), 16).unwrap();
        let mut net = UNet::new(&spec, 1).unwrap();
        let out = net.forward(random_batch(3, 16, 2), false).unwrap();
        assert_eq!(out.shape(), [1, 3, 16, 16]);
        assert!(out.data.iter().all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn zero_input_without_bn_gives_half() {
        let spec = build_architecture(&small_hp(3, 1, 4, 0), 16).unwrap();
        let mut net = UNet::new(&spec, 3).unwrap();
        let out = net.forward(Tensor::zeros(1, 2, 16, 16), false).unwrap();
        assert!(out.data.iter().all(|&p| p == 0.5));
    }

    #[test]
    fn wrong_input_size_is_rejected() {
        let spec = build_architecture(&small_hp(3, 0, 4, 0), 16).unwrap();
        let mut net = UNet::new(&spec, 0).unwrap();
        assert!(matches!(
            net.forward(Tensor::zeros(1, 1, 8, 8), false),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn runtime_count_matches_declared_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let n = rng.random_range(3..=6);
            let hp = small_hp(
                n,
                rng.random_range(0..=n),
                [4, 8, 12][rng.random_range(0..3)],
                rng.random_range(0..=1),
            );
            let spec = build_architecture(&hp, 64).unwrap();
            let net = UNet::new(&spec, 0).unwrap();
            assert_eq!(net.trainable_parameter_count(), parameter_count(&spec), "{hp}");
        }
    }

    #[test]
    fn same_seed_same_weights() {
        let spec = build_architecture(&small_hp(3, 1, 4, 1), 16).unwrap();
        let a = UNet::new(&spec, 9).unwrap().snapshot();
        let b = UNet::new(&spec, 9).unwrap().snapshot();
        let c = UNet::new(&spec, 10).unwrap().snapshot();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    fn weighted_loss(net: &mut UNet, x: &Tensor, w: &[f32]) -> f64 {
        let out = net.forward(x.clone(), true).unwrap();
        out.data.iter().zip(w).map(|(&p, &w)| p as f64 * w as f64).sum()
    }

    /// Directional finite differences per parameter vector. Max-pool and ReLU
    /// switches make a few directions non-smooth at any step size, so a small
    /// fraction of misses is tolerated.
    fn check_gradients(bn: u8) {
        let spec = build_architecture(&small_hp(3, 1, 4, bn), 16).unwrap();
        let mut net = UNet::new(&spec, 5).unwrap();
        let x = random_batch(4, 16, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w: Vec<f32> = (0..x.data.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        // Nonzero biases keep dead feature maps off the ReLU kink.
        for (p, _) in net.params() {
            if p.len() <= 16 {
                p.iter_mut().for_each(|v| *v += rng.random_range(-0.1..0.1));
            }
        }

        let out = net.forward(x.clone(), true).unwrap();
        let mut d = out;
        d.data.copy_from_slice(&w);
        net.backward(&d);
        let grads: Vec<Vec<f32>> = net.params().iter().map(|(_, g)| g.to_vec()).collect();

        let mut misses = Vec::new();
        for (slot, g) in grads.iter().enumerate() {
            let mut dir: Vec<f32> = (0..g.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let norm = dir.iter().map(|v| v * v).sum::<f32>().sqrt();
            dir.iter_mut().for_each(|v| *v /= norm);
            let analytic: f64 = g.iter().zip(&dir).map(|(&a, &b)| a as f64 * b as f64).sum();
            let hit = [1e-2f32, 3e-3, 1e-3].iter().any(|&eps| {
                let shift = |net: &mut UNet, k: f32| {
                    net.params()[slot].0.iter_mut().zip(&dir).for_each(|(p, d)| *p += k * d);
                };
                shift(&mut net, eps);
                let up = weighted_loss(&mut net, &x, &w);
                shift(&mut net, -2.0 * eps);
                let down = weighted_loss(&mut net, &x, &w);
                shift(&mut net, eps);
                let numeric = (up - down) / (2.0 * eps as f64);
                (numeric - analytic).abs() <= 0.1 * analytic.abs().max(0.1)
            });
            if !hit {
                misses.push(slot);
            }
        }
        net.clear_cache();
        assert!(
            misses.len() * 10 <= grads.len(),
            "mismatched slots {misses:?} of {}",
            grads.len()
        );
    }

    #[test]
    fn gradients_match_finite_differences() {
        check_gradients(0);
    }

    #[test]
    fn gradients_match_finite_differences_with_batch_norm() {
        check_gradients(1);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = build_architecture(&small_hp(3, 2, 4, 1), 16).unwrap();
        let mut net = UNet::new(&spec, 4).unwrap();
        let x = random_batch(2, 16, 8);
        net.forward(x.clone(), true).unwrap();
        net.clear_cache();
        net.save_checkpoint(dir.path()).unwrap();
        let mut loaded = UNet::load_checkpoint(dir.path()).unwrap();
        assert_eq!(loaded.spec(), net.spec());
        assert_eq!(loaded.snapshot(), net.snapshot());
        let a = net.forward(x.clone(), false).unwrap();
        let b = loaded.forward(x, false).unwrap();
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn corrupt_checkpoint_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let spec = build_architecture(&small_hp(3, 0, 4, 0), 8).unwrap();
        UNet::new(&spec, 0).unwrap().save_checkpoint(dir.path()).unwrap();
        let path = dir.path().join(WEIGHTS_FILE);
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(
            UNet::load_checkpoint(dir.path()),
            Err(Error::Checkpoint { .. })
        ));
    }
}
