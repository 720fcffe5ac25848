//! One-hidden-layer tanh encoders producing unit-norm embeddings, with exact
//! reverse-mode gradients.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;

use crate::binio::{Reader, Writer};
use crate::error::{invalid, Error, Result};
use crate::vecmath::{axpy, dot};

/// Vectors with a smaller norm cannot be normalized.
pub const NORMALIZE_EPS: f64 = 1e-12;

const MAGIC: &[u8; 4] = b"GENC";
const VERSION: u16 = 1;

/// A unit-norm embedding vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    /// Normalizes `v` into an embedding.
    pub fn normalize(v: &[f64]) -> Result<Self> {
        l2_normalize(v).map(|(u, _)| Self(u))
    }

    /// Wraps a vector that is already unit norm (to 1e-6).
    pub fn from_unit(v: Vec<f64>) -> Result<Self> {
        let n = crate::vecmath::norm(&v);
        if (n - 1.0).abs() > 1e-6 {
            return Err(invalid(format!("embedding norm {n} is not 1")));
        }
        Ok(Self(v))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl AsRef<[f64]> for Embedding {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Returns `v / |v|` and `|v|`.
pub fn l2_normalize(v: &[f64]) -> Result<(Vec<f64>, f64)> {
    let n = crate::vecmath::norm(v);
    if !(n > NORMALIZE_EPS) {
        return Err(Error::Degenerate {
            norm: n,
            eps: NORMALIZE_EPS,
        });
    }
    Ok((v.iter().map(|x| x / n).collect(), n))
}

/// Vector-Jacobian product of normalization: `(I - u u^T) g / |v|` where
/// `u` is the normalized output.
pub fn l2_normalize_vjp(unit: &[f64], norm: f64, g: &[f64]) -> Vec<f64> {
    let ug = dot(unit, g);
    unit.iter()
        .zip(g)
        .map(|(u, gi)| (gi - u * ug) / norm)
        .collect()
}

/// Jacobian-vector product of normalization. The Jacobian is symmetric, so
/// this coincides with the VJP.
pub fn l2_normalize_jvp(unit: &[f64], norm: f64, t: &[f64]) -> Vec<f64> {
    l2_normalize_vjp(unit, norm, t)
}

/// Weights of `x -> normalize(W2 tanh(W1 x + b1) + b2)`, stored flat as
/// `W1 (hidden x input) | b1 | W2 (dim x hidden) | b2`, matrices row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    input_dim: usize,
    hidden_dim: usize,
    embed_dim: usize,
    data: Vec<f64>,
}

/// Intermediate values of one forward pass, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    hidden: Vec<f64>,
    norm: f64,
    embedding: Vec<f64>,
}

impl Forward {
    pub fn embedding(&self) -> &[f64] {
        &self.embedding
    }
}

/// Gradients with respect to every parameter (same flat layout as
/// [`EncoderParams`]) and to the input features.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientBundle {
    pub params: Vec<f64>,
    pub input: Vec<f64>,
}

fn param_count(input: usize, hidden: usize, dim: usize) -> usize {
    hidden * input + hidden + dim * hidden + dim
}

impl EncoderParams {
    /// Glorot-uniform weights and zero biases.
    pub fn init(input_dim: usize, hidden_dim: usize, embed_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        if input_dim == 0 || hidden_dim == 0 || embed_dim == 0 {
            return Err(invalid("encoder dimensions must be positive"));
        }
        let mut data = vec![0.0; param_count(input_dim, hidden_dim, embed_dim)];
        let limit1 = (6.0 / (input_dim + hidden_dim) as f64).sqrt();
        let limit2 = (6.0 / (hidden_dim + embed_dim) as f64).sqrt();
        let mut p = Self {
            input_dim,
            hidden_dim,
            embed_dim,
            data: Vec::new(),
        };
        let (w1, rest) = data.split_at_mut(hidden_dim * input_dim);
        for w in w1 {
            *w = rng.random_range(-limit1..limit1);
        }
        let w2 = &mut rest[hidden_dim..hidden_dim + embed_dim * hidden_dim];
        for w in w2 {
            *w = rng.random_range(-limit2..limit2);
        }
        p.data = data;
        Ok(p)
    }

    pub fn from_parts(
        input_dim: usize,
        hidden_dim: usize,
        embed_dim: usize,
        w1: &[f64],
        b1: &[f64],
        w2: &[f64],
        b2: &[f64],
    ) -> Result<Self> {
        if w1.len() != hidden_dim * input_dim
            || b1.len() != hidden_dim
            || w2.len() != embed_dim * hidden_dim
            || b2.len() != embed_dim
        {
            return Err(invalid("encoder parameter shapes are inconsistent"));
        }
        let data: Vec<f64> = [w1, b1, w2, b2].concat();
        if data.iter().any(|x| !x.is_finite()) {
            return Err(invalid("encoder parameters must be finite"));
        }
        Ok(Self {
            input_dim,
            hidden_dim,
            embed_dim,
            data,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    fn offsets(&self) -> [usize; 4] {
        let w1 = 0;
        let b1 = self.hidden_dim * self.input_dim;
        let w2 = b1 + self.hidden_dim;
        let b2 = w2 + self.embed_dim * self.hidden_dim;
        [w1, b1, w2, b2]
    }

    pub fn w1(&self) -> &[f64] {
        let o = self.offsets();
        &self.data[o[0]..o[1]]
    }

    pub fn b1(&self) -> &[f64] {
        let o = self.offsets();
        &self.data[o[1]..o[2]]
    }

    pub fn w2(&self) -> &[f64] {
        let o = self.offsets();
        &self.data[o[2]..o[3]]
    }

    pub fn b2(&self) -> &[f64] {
        let o = self.offsets();
        &self.data[o[3]..]
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim {
            return Err(invalid(format!(
                "feature dimension {} does not match encoder input {}",
                x.len(),
                self.input_dim
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Forward> {
        self.check_input(x)?;
        let (w1, b1, w2, b2) = (self.w1(), self.b1(), self.w2(), self.b2());
        let n = self.input_dim;
        let hidden: Vec<f64> = (0..self.hidden_dim)
            .map(|k| (dot(&w1[k * n..(k + 1) * n], x) + b1[k]).tanh())
            .collect();
        let h = self.hidden_dim;
        let pre: Vec<f64> = (0..self.embed_dim)
            .map(|k| dot(&w2[k * h..(k + 1) * h], &hidden) + b2[k])
            .collect();
        let (embedding, norm) = l2_normalize(&pre)?;
        Ok(Forward {
            hidden,
            norm,
            embedding,
        })
    }

    pub fn encode(&self, x: &[f64]) -> Result<Embedding> {
        self.forward(x).map(|f| Embedding(f.embedding))
    }

    /// Accumulates parameter gradients for upstream gradient `upstream` on
    /// the embedding into `grad` and returns the gradient on the input.
    pub fn backward_into(&self, x: &[f64], fwd: &Forward, upstream: &[f64], grad: &mut [f64]) -> Vec<f64> {
        debug_assert_eq!(grad.len(), self.data.len());
        let [_, ob1, ow2, ob2] = self.offsets();
        let (h, n) = (self.hidden_dim, self.input_dim);
        let dy = l2_normalize_vjp(&fwd.embedding, fwd.norm, upstream);

        let w2 = self.w2();
        let mut dh = vec![0.0; h];
        for (k, dyk) in dy.iter().enumerate() {
            if *dyk == 0.0 {
                continue;
            }
            axpy(*dyk, &fwd.hidden, &mut grad[ow2 + k * h..ow2 + (k + 1) * h]);
            grad[ob2 + k] += dyk;
            axpy(*dyk, &w2[k * h..(k + 1) * h], &mut dh);
        }

        let w1 = self.w1();
        let mut dx = vec![0.0; n];
        for k in 0..h {
            let da = dh[k] * (1.0 - fwd.hidden[k] * fwd.hidden[k]);
            if da == 0.0 {
                continue;
            }
            axpy(da, x, &mut grad[k * n..(k + 1) * n]);
            grad[ob1 + k] += da;
            axpy(da, &w1[k * n..(k + 1) * n], &mut dx);
        }
        dx
    }

    pub fn encode_backward(&self, x: &[f64], upstream: &[f64]) -> Result<GradientBundle> {
        let fwd = self.forward(x)?;
        if upstream.len() != self.embed_dim {
            return Err(invalid(format!(
                "upstream gradient has dimension {}, expected {}",
                upstream.len(),
                self.embed_dim
            )));
        }
        let mut params = vec![0.0; self.data.len()];
        let input = self.backward_into(x, &fwd, upstream, &mut params);
        Ok(GradientBundle { params, input })
    }

    pub fn write<W: Write>(&self, out: W) -> Result<W> {
        let mut w = Writer::new(out);
        w.bytes(MAGIC)?;
        w.u16(VERSION)?;
        w.u32(self.input_dim as u32)?;
        w.u32(self.hidden_dim as u32)?;
        w.u32(self.embed_dim as u32)?;
        w.f32s(self.data.iter().map(|x| *x as f32))?;
        w.finish()
    }

    pub fn read<R: Read>(input: R) -> Result<Self> {
        let mut r = Reader::new(input);
        r.magic(MAGIC)?;
        r.version(VERSION)?;
        let input_dim = r.u32()? as usize;
        let hidden_dim = r.u32()? as usize;
        let embed_dim = r.u32()? as usize;
        if input_dim == 0 || hidden_dim == 0 || embed_dim == 0 {
            return Err(r.error("zero encoder dimension"));
        }
        let n = param_count(input_dim, hidden_dim, embed_dim);
        let data: Vec<f64> = r.f32s(n)?.into_iter().map(f64::from).collect();
        if data.iter().any(|x| !x.is_finite()) {
            return Err(r.error("non-finite parameter"));
        }
        r.expect_eof()?;
        Ok(Self {
            input_dim,
            hidden_dim,
            embed_dim,
            data,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write(BufWriter::new(File::create(path)?))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read(BufReader::new(File::open(path)?))
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    pub(crate) fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    #[test]
    fn unit_norm_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = EncoderParams::init(7, 10, 5, &mut rng).unwrap();
        for _ in 0..1000 {
            let x = random_vec(&mut rng, 7);
            let z = p.encode(&x).unwrap();
            assert!((crate::vecmath::norm(z.as_slice()) - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn output_scale_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = EncoderParams::init(4, 6, 3, &mut rng).unwrap();
        let c = 3.7;
        let w2: Vec<f64> = p.w2().iter().map(|w| w * c).collect();
        let b2: Vec<f64> = (0..3).map(|_| rng.random_range(-0.5..0.5)).collect();
        let base = EncoderParams::from_parts(4, 6, 3, p.w1(), p.b1(), p.w2(), &b2).unwrap();
        let b2s: Vec<f64> = b2.iter().map(|b| b * c).collect();
        let scaled = EncoderParams::from_parts(4, 6, 3, p.w1(), p.b1(), &w2, &b2s).unwrap();
        let x = random_vec(&mut rng, 4);
        let (a, b) = (base.encode(&x).unwrap(), scaled.encode(&x).unwrap());
        for (u, v) in a.as_slice().iter().zip(b.as_slice()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn toy_network_hand_value() {
        // 3 -> 4 -> 2 network. Expected value computed in a separate Python
        // session: h = tanh(W1 x + b1), y = W2 h + b2, z = y / |y|.
        let w1 = [
            0.5, -0.2, 0.1, //
            0.3, 0.8, -0.5, //
            -0.7, 0.2, 0.4, //
            0.1, 0.1, 0.1,
        ];
        let b1 = [0.0, 0.1, -0.1, 0.2];
        let w2 = [0.6, -0.4, 0.2, 1.0, -0.3, 0.5, 0.7, -0.2];
        let b2 = [0.05, -0.05];
        let p = EncoderParams::from_parts(3, 4, 2, &w1, &b1, &w2, &b2).unwrap();
        let z = p.encode(&[1.0, -1.0, 0.5]).unwrap();
        let expect = [0.595_904_400_465_067, -0.803_055_381_344_505_4];
        for (a, b) in z.as_slice().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn dimension_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = EncoderParams::init(4, 6, 3, &mut rng).unwrap();
        assert!(matches!(p.encode(&[1.0; 5]), Err(Error::InvalidArgument(_))));
        assert!(p.encode_backward(&[1.0; 4], &[1.0; 2]).is_err());
    }

    #[test]
    fn zero_vector_is_degenerate() {
        assert!(matches!(l2_normalize(&[0.0; 4]), Err(Error::Degenerate { .. })));
        let (u, n) = l2_normalize(&[0.6, 0.8]).unwrap();
        assert_eq!(n, 1.0);
        assert_eq!(u, vec![0.6, 0.8]);
        let (a, _) = l2_normalize(&[1.0, 2.0, -2.0]).unwrap();
        let (b, _) = l2_normalize(&[2.5, 5.0, -5.0]).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn normalize_vjp_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let v = random_vec(&mut rng, 6);
            let g = random_vec(&mut rng, 6);
            let (u, n) = l2_normalize(&v).unwrap();
            let vjp = l2_normalize_vjp(&u, n, &g);
            let jvp = l2_normalize_jvp(&u, n, &g);
            assert_eq!(vjp, jvp);
            let h = 1e-6;
            for k in 0..6 {
                let mut vp = v.clone();
                let mut vm = v.clone();
                vp[k] += h;
                vm[k] -= h;
                let f = |w: &[f64]| dot(&l2_normalize(w).unwrap().0, &g);
                let fd = (f(&vp) - f(&vm)) / (2.0 * h);
                assert!((fd - vjp[k]).abs() < 1e-6, "{fd} vs {}", vjp[k]);
            }
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = EncoderParams::init(5, 8, 4, &mut rng).unwrap();
        let g = p.encode_backward(&random_vec(&mut rng, 5), &[0.0; 4]).unwrap();
        assert!(g.params.iter().all(|x| *x == 0.0));
        assert!(g.input.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn norm_has_zero_gradient() {
        // d|z|^2/dz = 2z; pulled back through normalization it vanishes.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = EncoderParams::init(5, 8, 4, &mut rng).unwrap();
        let x = random_vec(&mut rng, 5);
        let z = p.encode(&x).unwrap();
        let up: Vec<f64> = z.as_slice().iter().map(|v| 2.0 * v).collect();
        let g = p.encode_backward(&x, &up).unwrap();
        assert!(g.params.iter().chain(&g.input).all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut worst: f64 = 0.0;
        for _ in 0..20 {
            let p = EncoderParams::init(6, 9, 4, &mut rng).unwrap();
            let x = random_vec(&mut rng, 6);
            let up = random_vec(&mut rng, 4);
            let g = p.encode_backward(&x, &up).unwrap();
            let h = 1e-5;
            let loss = |q: &EncoderParams, xx: &[f64]| dot(q.encode(xx).unwrap().as_slice(), &up);
            for _ in 0..5 {
                let k = rng.random_range(0..p.as_slice().len());
                let mut qp = p.clone();
                let mut qm = p.clone();
                qp.as_mut_slice()[k] += h;
                qm.as_mut_slice()[k] -= h;
                let fd = (loss(&qp, &x) - loss(&qm, &x)) / (2.0 * h);
                if fd.abs().max(g.params[k].abs()) > 1e-7 {
                    worst = worst.max(rel_err(fd, g.params[k]));
                }
            }
            for k in 0..6 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[k] += h;
                xm[k] -= h;
                let fd = (loss(&p, &xp) - loss(&p, &xm)) / (2.0 * h);
                worst = worst.max(rel_err(fd, g.input[k]));
            }
        }
        assert!(worst <= 1e-4, "max relative error {worst}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = EncoderParams::init(5, 8, 4, &mut rng).unwrap();
        let bytes = p.write(Vec::new()).unwrap();
        let back = EncoderParams::read(bytes.as_slice()).unwrap();
        assert_eq!(back.write(Vec::new()).unwrap(), bytes);
        let mut bad = bytes.clone();
        bad[1] = b'X';
        assert!(matches!(
            EncoderParams::read(bad.as_slice()),
            Err(Error::Format { offset: 0, .. })
        ));
        assert!(EncoderParams::read(&bytes[..bytes.len() - 1]).is_err());
    }
}
