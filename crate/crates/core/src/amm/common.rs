use rand::Rng;

use crate::error::Result;
use crate::nn::{Conv2d, LayerNorm, Linear, ParamStore, Real, Var};

/// Query/key/value/output projections of one attention branch.
#[derive(Clone, Debug)]
pub struct Qkvo {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl Qkvo {
    pub fn new<T: Real, R: Rng + ?Sized>(ps: &mut ParamStore<T>, name: &str, qk_in: usize, qk_dim: usize, c: usize, rng: &mut R) -> Self {
        Self {
            q: Linear::new(ps, &format!("{name}.q"), qk_in, qk_dim, true, rng),
            k: Linear::new(ps, &format!("{name}.k"), qk_in, qk_dim, true, rng),
            v: Linear::new(ps, &format!("{name}.v"), c, c, true, rng),
            o: Linear::new(ps, &format!("{name}.o"), c, c, true, rng),
        }
    }
}

/// `x + Conv1x1(concat(a, b))` followed by `y + FFN(LN(y))`, both residual
/// branches zero-initialised.
#[derive(Clone, Debug)]
pub struct FuseFfn {
    pub fuse: Conv2d,
    pub norm: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FuseFfn {
    pub fn new<T: Real, R: Rng + ?Sized>(ps: &mut ParamStore<T>, name: &str, c: usize, mult: usize, rng: &mut R) -> Self {
        let fuse = Conv2d::new(ps, &format!("{name}.fuse"), 2 * c, c, 1, true, rng);
        fuse.zero_init(ps);
        let fc2 = Linear::new(ps, &format!("{name}.ffn.fc2"), mult * c, c, true, rng);
        fc2.zero_init(ps);
        Self {
            fuse,
            norm: LayerNorm::new(ps, &format!("{name}.ffn.norm"), c),
            fc1: Linear::new(ps, &format!("{name}.ffn.fc1"), c, mult * c, true, rng),
            fc2,
        }
    }

    pub fn forward<'g, T: Real>(&self, x: Var<'g, T>, a: Var<'g, T>, b: Var<'g, T>) -> Result<Var<'g, T>> {
        let y = x.add(self.fuse.forward(Var::concat(&[a, b], 3)?)?)?;
        let f = self.fc2.forward(self.fc1.forward(self.norm.forward(y)?)?.mish())?;
        y.add(f)
    }
}
