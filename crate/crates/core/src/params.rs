//! Named parameter blocks.
//!
//! Every learnable component exposes its tensors as named flat `f64` blocks.
//! Gradients are stored in a value of the same type, which keeps the
//! optimizer, finite-difference checks and checkpoint I/O generic.

pub trait Params {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64]));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64]));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, v| n += v.len());
        n
    }

    fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit(&mut |_, v| out.extend_from_slice(v));
        out
    }

    /// Overwrites all blocks from a flat vector in visiting order.
    fn load_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        self.visit_mut(&mut |_, v| {
            let n = v.len();
            v.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        });
        assert_eq!(offset, flat.len(), "flat parameter length mismatch");
    }

    fn fill(&mut self, value: f64) {
        self.visit_mut(&mut |_, v| v.iter_mut().for_each(|x| *x = value));
    }

    /// `(name, len)` of each block in visiting order.
    fn block_layout(&self) -> Vec<(String, usize)> {
        let mut out = Vec::new();
        self.visit(&mut |name, v| out.push((name.to_string(), v.len())));
        out
    }
}

/// `dst += src` for two values with identical layout.
pub fn add_assign<P: Params>(dst: &mut P, src: &P) {
    let flat = src.to_flat();
    let mut offset = 0;
    dst.visit_mut(&mut |_, v| {
        for x in v.iter_mut() {
            *x += flat[offset];
            offset += 1;
        }
    });
}

pub fn all_finite<P: Params>(p: &P) -> Option<String> {
    let mut bad = None;
    p.visit(&mut |name, v| {
        if bad.is_none() && v.iter().any(|x| !x.is_finite()) {
            bad = Some(name.to_string());
        }
    });
    bad
}
