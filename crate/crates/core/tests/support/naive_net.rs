//! Loop-based reference implementation of the detector network and a
//! finite-difference gradient oracle built on it.
//!
//! The parameter layout is spelled out here by hand rather than taken from the
//! library, so a layout bug shows up as a mismatch.

#![allow(clippy::needless_range_loop)]
#![allow(dead_code)]

pub const NP: usize = 139_937;
const O_W1: usize = 0;
const O_B1: usize = 256;
const O_W2: usize = 320;
const O_B2: usize = 16_704;
const O_W3: usize = 16_768;
const O_B3: usize = 24_960;
const O_W4: usize = 24_992;
const O_B4: usize = 139_680;
const O_W5: usize = 139_808;
const O_B5: usize = 139_936;

// Geometry: x 31x20, z1 64x30x19, p1 64x30x6, z2/a2 64x29x5, z3 32x28x4, p3 32x14x2.
const Z1: usize = 30 * 19;
const P1: usize = 30 * 6;
const Z2: usize = 29 * 5;
const Z3: usize = 28 * 4;
const P3: usize = 14 * 2;

fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

fn pos(v: f64) -> bool {
    v > 0.0
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

pub fn bce(z: f64, y: u8) -> f64 {
    let p = sigmoid(z).clamp(1e-7, 1.0 - 1e-7);
    if y == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// All intermediate values of one example.
#[derive(Clone)]
pub struct State {
    pub x: Vec<f64>,
    pub z1: Vec<f64>,
    pub p1: Vec<f64>,
    pub p1arg: Vec<usize>,
    pub z2: Vec<f64>,
    pub a2: Vec<f64>,
    pub z3: Vec<f64>,
    pub p3: Vec<f64>,
    pub p3arg: Vec<usize>,
    pub hp: Vec<f64>,
    pub h: Vec<f64>,
    pub z: f64,
    pub y: u8,
    pub loss: f64,
}

pub struct Net<'a> {
    pub p: &'a [f64],
    /// Dense-layer weights transposed to `[input][hidden]` for column updates.
    w4t: Vec<f64>,
}

impl<'a> Net<'a> {
    pub fn new(p: &'a [f64]) -> Self {
        assert_eq!(p.len(), NP);
        let mut w4t = vec![0.0; 896 * 128];
        for j in 0..128 {
            for i in 0..896 {
                w4t[i * 128 + j] = p[O_W4 + j * 896 + i];
            }
        }
        Self { p, w4t }
    }

    fn w1(&self, c: usize, di: usize, dj: usize) -> f64 {
        self.p[O_W1 + c * 4 + di * 2 + dj]
    }
    fn w2(&self, o: usize, c: usize, di: usize, dj: usize) -> f64 {
        self.p[O_W2 + (o * 64 + c) * 4 + di * 2 + dj]
    }
    fn w3(&self, o: usize, c: usize, di: usize, dj: usize) -> f64 {
        self.p[O_W3 + (o * 64 + c) * 4 + di * 2 + dj]
    }
    fn w4(&self, j: usize, i: usize) -> f64 {
        self.p[O_W4 + j * 896 + i]
    }

    /// Pools one channel of relu(z1) with 1x3 windows.
    fn pool1(z1c: &[f64]) -> (Vec<f64>, Vec<usize>) {
        let mut out = vec![0.0; P1];
        let mut arg = vec![0; P1];
        for y in 0..30 {
            for xo in 0..6 {
                let mut bi = y * 19 + xo * 3;
                let mut bv = relu(z1c[bi]);
                for d in 1..3 {
                    let i = y * 19 + xo * 3 + d;
                    if relu(z1c[i]) > bv {
                        bv = relu(z1c[i]);
                        bi = i;
                    }
                }
                out[y * 6 + xo] = bv;
                arg[y * 6 + xo] = bi;
            }
        }
        (out, arg)
    }

    /// Pools one channel of relu(z3) with 2x2 windows.
    fn pool3(z3c: &[f64]) -> (Vec<f64>, Vec<usize>) {
        let mut out = vec![0.0; P3];
        let mut arg = vec![0; P3];
        for yo in 0..14 {
            for xo in 0..2 {
                let mut bi = (2 * yo) * 4 + 2 * xo;
                let mut bv = relu(z3c[bi]);
                for di in 0..2 {
                    for dj in 0..2 {
                        let i = (2 * yo + di) * 4 + 2 * xo + dj;
                        if relu(z3c[i]) > bv {
                            bv = relu(z3c[i]);
                            bi = i;
                        }
                    }
                }
                out[yo * 2 + xo] = bv;
                arg[yo * 2 + xo] = bi;
            }
        }
        (out, arg)
    }

    fn conv1(&self, x: &[f64]) -> Vec<f64> {
        let mut z1 = vec![0.0; 64 * Z1];
        for c in 0..64 {
            for y in 0..30 {
                for xx in 0..19 {
                    let mut acc = self.p[O_B1 + c];
                    for di in 0..2 {
                        for dj in 0..2 {
                            acc += self.w1(c, di, dj) * x[(y + di) * 20 + xx + dj];
                        }
                    }
                    z1[c * Z1 + y * 19 + xx] = acc;
                }
            }
        }
        z1
    }

    fn conv2_channel(&self, o: usize, p1: &[f64]) -> Vec<f64> {
        let mut out = vec![self.p[O_B2 + o]; Z2];
        for c in 0..64 {
            for di in 0..2 {
                for dj in 0..2 {
                    let w = self.w2(o, c, di, dj);
                    for y in 0..29 {
                        for xx in 0..5 {
                            out[y * 5 + xx] += w * p1[c * P1 + (y + di) * 6 + xx + dj];
                        }
                    }
                }
            }
        }
        out
    }

    fn conv3_channel(&self, o: usize, a2: &[f64]) -> Vec<f64> {
        let mut out = vec![self.p[O_B3 + o]; Z3];
        for c in 0..64 {
            for di in 0..2 {
                for dj in 0..2 {
                    let w = self.w3(o, c, di, dj);
                    for y in 0..28 {
                        for xx in 0..4 {
                            out[y * 4 + xx] += w * a2[c * Z2 + (y + di) * 5 + xx + dj];
                        }
                    }
                }
            }
        }
        out
    }

    fn head(&self, p3: &[f64]) -> (Vec<f64>, Vec<f64>, f64) {
        let hp: Vec<f64> = (0..128)
            .map(|j| self.p[O_B4 + j] + (0..896).map(|i| self.w4(j, i) * p3[i]).sum::<f64>())
            .collect();
        let h: Vec<f64> = hp.iter().map(|&v| relu(v)).collect();
        let z = self.p[O_B5] + (0..128).map(|j| self.p[O_W5 + j] * h[j]).sum::<f64>();
        (hp, h, z)
    }

    pub fn forward(&self, x: &[f64], y: u8) -> State {
        assert_eq!(x.len(), 620);
        let z1 = self.conv1(x);
        let mut p1 = vec![0.0; 64 * P1];
        let mut p1arg = vec![0; 64 * P1];
        for c in 0..64 {
            let (v, a) = Self::pool1(&z1[c * Z1..(c + 1) * Z1]);
            p1[c * P1..(c + 1) * P1].copy_from_slice(&v);
            p1arg[c * P1..(c + 1) * P1].copy_from_slice(&a);
        }
        let mut z2 = vec![0.0; 64 * Z2];
        for o in 0..64 {
            z2[o * Z2..(o + 1) * Z2].copy_from_slice(&self.conv2_channel(o, &p1));
        }
        let a2: Vec<f64> = z2.iter().map(|&v| relu(v)).collect();
        let mut z3 = vec![0.0; 32 * Z3];
        for o in 0..32 {
            z3[o * Z3..(o + 1) * Z3].copy_from_slice(&self.conv3_channel(o, &a2));
        }
        let mut p3 = vec![0.0; 896];
        let mut p3arg = vec![0; 896];
        for o in 0..32 {
            let (v, a) = Self::pool3(&z3[o * Z3..(o + 1) * Z3]);
            p3[o * P3..(o + 1) * P3].copy_from_slice(&v);
            p3arg[o * P3..(o + 1) * P3].copy_from_slice(&a);
        }
        let (hp, h, z) = self.head(&p3);
        State {
            x: x.to_vec(),
            z1,
            p1,
            p1arg,
            z2,
            a2,
            z3,
            p3,
            p3arg,
            hp,
            h,
            z,
            y,
            loss: bce(z, y),
        }
    }

    /// Loss after the hidden pre-activations move by `dhp`, with a kink flag.
    fn tail_hp(&self, st: &State, dhp: &[f64]) -> (f64, bool) {
        let mut z = self.p[O_B5];
        let mut kink = false;
        for j in 0..128 {
            let v = st.hp[j] + dhp[j];
            kink |= pos(v) != pos(st.hp[j]);
            z += self.p[O_W5 + j] * relu(v);
        }
        (bce(z, st.y), kink)
    }

    /// Loss after the given flatten entries change; `changes` holds (index, delta).
    fn tail_flat(&self, st: &State, changes: &[(usize, f64)]) -> (f64, bool) {
        let mut dhp = [0.0; 128];
        for &(i, d) in changes {
            if d != 0.0 {
                for (v, w) in dhp.iter_mut().zip(&self.w4t[i * 128..(i + 1) * 128]) {
                    *v += w * d;
                }
            }
        }
        self.tail_hp(st, &dhp)
    }

    /// Loss after z3 channels are replaced; `new_z3` maps channel to its values.
    fn tail_z3(&self, st: &State, new_z3: &[(usize, Vec<f64>)]) -> (f64, bool) {
        let mut kink = false;
        let mut changes = Vec::new();
        for (o, zc) in new_z3 {
            let old = &st.z3[o * Z3..(o + 1) * Z3];
            for (a, b) in zc.iter().zip(old) {
                kink |= pos(*a) != pos(*b);
            }
            let (v, arg) = Self::pool3(zc);
            for k in 0..P3 {
                let i = o * P3 + k;
                kink |= arg[k] != st.p3arg[i];
                changes.push((i, v[k] - st.p3[i]));
            }
        }
        let (l, k2) = self.tail_flat(st, &changes);
        (l, kink || k2)
    }

    /// Loss after a2 changes by `da2` (sparse per channel).
    fn tail_a2(&self, st: &State, da2: &[(usize, Vec<f64>)]) -> (f64, bool) {
        let mut new_z3 = Vec::with_capacity(32);
        for o in 0..32 {
            let mut zc = st.z3[o * Z3..(o + 1) * Z3].to_vec();
            for (c, d) in da2 {
                for di in 0..2 {
                    for dj in 0..2 {
                        let w = self.w3(o, *c, di, dj);
                        for y in 0..28 {
                            for xx in 0..4 {
                                zc[y * 4 + xx] += w * d[(y + di) * 5 + xx + dj];
                            }
                        }
                    }
                }
            }
            new_z3.push((o, zc));
        }
        self.tail_z3(st, &new_z3)
    }

    /// Loss after channel `c` of z2 moves by `dz`.
    fn tail_z2_channel(&self, st: &State, c: usize, dz: &[f64]) -> (f64, bool) {
        let mut kink = false;
        let mut d = vec![0.0; Z2];
        for k in 0..Z2 {
            let old = st.z2[c * Z2 + k];
            let new = old + dz[k];
            kink |= pos(new) != pos(old);
            d[k] = relu(new) - st.a2[c * Z2 + k];
        }
        let (l, k2) = self.tail_a2(st, &[(c, d)]);
        (l, kink || k2)
    }

    /// Loss after channel `c` of z1 moves by `dz`.
    fn tail_z1_channel(&self, st: &State, c: usize, dz: &[f64]) -> (f64, bool) {
        let mut kink = false;
        let old = &st.z1[c * Z1..(c + 1) * Z1];
        let new: Vec<f64> = old.iter().zip(dz).map(|(a, b)| a + b).collect();
        for (a, b) in new.iter().zip(old) {
            kink |= pos(*a) != pos(*b);
        }
        let (v, arg) = Self::pool1(&new);
        let mut dp1 = vec![0.0; P1];
        for k in 0..P1 {
            kink |= arg[k] != st.p1arg[c * P1 + k];
            dp1[k] = v[k] - st.p1[c * P1 + k];
        }
        let mut da2 = Vec::with_capacity(64);
        for o in 0..64 {
            let mut d = vec![0.0; Z2];
            for di in 0..2 {
                for dj in 0..2 {
                    let w = self.w2(o, c, di, dj);
                    for y in 0..29 {
                        for xx in 0..5 {
                            d[y * 5 + xx] += w * dp1[(y + di) * 6 + xx + dj];
                        }
                    }
                }
            }
            for k in 0..Z2 {
                let zo = st.z2[o * Z2 + k];
                let zn = zo + d[k];
                kink |= pos(zn) != pos(zo);
                d[k] = relu(zn) - st.a2[o * Z2 + k];
            }
            da2.push((o, d));
        }
        let (l, k2) = self.tail_a2(st, &da2);
        (l, kink || k2)
    }

    /// Loss with parameter `i` shifted by `delta`, and whether any ReLU sign or
    /// pooling winner changed relative to `st`.
    pub fn perturbed_loss(&self, st: &State, i: usize, delta: f64) -> (f64, bool) {
        if i >= O_B5 {
            let z = st.z + delta;
            (bce(z, st.y), false)
        } else if i >= O_W5 {
            let j = i - O_W5;
            (bce(st.z + delta * st.h[j], st.y), false)
        } else if i >= O_B4 {
            let mut dhp = [0.0; 128];
            dhp[i - O_B4] = delta;
            self.tail_hp(st, &dhp)
        } else if i >= O_W4 {
            let j = (i - O_W4) / 896;
            let f = (i - O_W4) % 896;
            let mut dhp = [0.0; 128];
            dhp[j] = delta * st.p3[f];
            self.tail_hp(st, &dhp)
        } else if i >= O_B3 {
            let o = i - O_B3;
            let zc: Vec<f64> = st.z3[o * Z3..(o + 1) * Z3].iter().map(|v| v + delta).collect();
            self.tail_z3(st, &[(o, zc)])
        } else if i >= O_W3 {
            let k = i - O_W3;
            let (o, c, di, dj) = (k / 256, (k / 4) % 64, (k / 2) % 2, k % 2);
            let mut zc = st.z3[o * Z3..(o + 1) * Z3].to_vec();
            for y in 0..28 {
                for xx in 0..4 {
                    zc[y * 4 + xx] += delta * st.a2[c * Z2 + (y + di) * 5 + xx + dj];
                }
            }
            self.tail_z3(st, &[(o, zc)])
        } else if i >= O_B2 {
            let c = i - O_B2;
            self.tail_z2_channel(st, c, &[delta; Z2])
        } else if i >= O_W2 {
            let k = i - O_W2;
            let (o, c, di, dj) = (k / 256, (k / 4) % 64, (k / 2) % 2, k % 2);
            let mut dz = vec![0.0; Z2];
            for y in 0..29 {
                for xx in 0..5 {
                    dz[y * 5 + xx] = delta * st.p1[c * P1 + (y + di) * 6 + xx + dj];
                }
            }
            self.tail_z2_channel(st, o, &dz)
        } else if i >= O_B1 {
            self.tail_z1_channel(st, i - O_B1, &[delta; Z1])
        } else {
            let (c, di, dj) = (i / 4, (i / 2) % 2, i % 2);
            let mut dz = vec![0.0; Z1];
            for y in 0..30 {
                for xx in 0..19 {
                    dz[y * 19 + xx] = delta * st.x[(y + di) * 20 + xx + dj];
                }
            }
            self.tail_z1_channel(st, c, &dz)
        }
    }
}

/// Outcome of a finite-difference sweep over every parameter.
pub struct GradCheck {
    pub numeric: Vec<f64>,
    /// Example-parameter stencils that straddled a ReLU or pooling switch.
    pub one_sided: usize,
    /// Stencils with a switch on both sides; their numeric value is NaN.
    pub unresolved: usize,
}

/// Central differences of the mean loss over the batch.
///
/// Where the central stencil crosses a ReLU or max-pool switch the loss is not
/// differentiable inside the stencil, so a second-order one-sided difference on
/// the smooth side is used for that example.
/// `numeric[k]` is the derivative with respect to parameter `indices[k]`.
pub fn numeric_gradient(params: &[f64], xs: &[Vec<f64>], ys: &[u8], h: f64, indices: &[usize]) -> GradCheck {
    assert_eq!(params.len(), NP);
    let net = Net::new(params);
    let b = xs.len() as f64;
    let mut numeric = vec![0.0; indices.len()];
    let (mut one_sided, mut unresolved) = (0, 0);
    for (x, &y) in xs.iter().zip(ys) {
        let st = net.forward(x, y);
        for (&i, g) in indices.iter().zip(numeric.iter_mut()) {
            let (lp, kp) = net.perturbed_loss(&st, i, h);
            let (lm, km) = net.perturbed_loss(&st, i, -h);
            let d = match (kp, km) {
                (false, false) => (lp - lm) / (2.0 * h),
                (true, false) => {
                    one_sided += 1;
                    one_sided_diff(&net, &st, i, -h, lm)
                }
                (false, true) => {
                    one_sided += 1;
                    one_sided_diff(&net, &st, i, h, lp)
                }
                (true, true) => {
                    unresolved += 1;
                    f64::NAN
                }
            };
            *g += d / b;
        }
    }
    GradCheck {
        numeric,
        one_sided,
        unresolved,
    }
}

/// (-3 f(0) + 4 f(s) - f(2s)) / 2s, falling back to first order if 2s crosses a switch.
fn one_sided_diff(net: &Net, st: &State, i: usize, s: f64, f1: f64) -> f64 {
    let (f2, k2) = net.perturbed_loss(st, i, 2.0 * s);
    if k2 {
        (f1 - st.loss) / s
    } else {
        (-3.0 * st.loss + 4.0 * f1 - f2) / (2.0 * s)
    }
}

/// |a - n| / max(|a|, |n|, floor).
pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    let d = (a - n).abs();
    if d.is_nan() {
        return f64::INFINITY;
    }
    d / a.abs().max(n.abs()).max(floor)
}
