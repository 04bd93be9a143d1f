// Fused LSTM / GRU recurrences with hand-written backpropagation through
// time. The input projection `W_ih·x + b` is computed by the caller (one
// `linear` over all positions); these kernels only run the recurrent part.
//
// Several sentences can share one call: `xp` holds their rows back to back
// and `lengths` says how many belong to each. All sentences advance in
// lockstep so the recurrent weights are applied to every active state at
// once, but each hidden value is computed exactly as if its sentence had run
// alone (the blocked product is bitwise equal to the per-row dot).
//
// With `reverse`, a sentence's positions are visited len−1, …, 0, and each
// state is still stored at its own position.

use super::kernels::{activate, gemm_nt, outer_accumulate, transpose, Activation};
use super::Real;

#[inline]
fn position(step: usize, steps: usize, reverse: bool) -> usize {
    if reverse {
        steps - 1 - step
    } else {
        step
    }
}

/// Row layout of a packed batch of sentences.
#[derive(Debug, Clone)]
pub(crate) struct Packing {
    lengths: Vec<usize>,
    offsets: Vec<usize>,
    longest: usize,
    reverse: bool,
}

impl Packing {
    pub(crate) fn new(lengths: &[usize], reverse: bool) -> Self {
        let mut offsets = Vec::with_capacity(lengths.len());
        let mut acc = 0;
        for &l in lengths {
            offsets.push(acc);
            acc += l;
        }
        Packing {
            lengths: lengths.to_vec(),
            offsets,
            longest: lengths.iter().copied().max().unwrap_or(0),
            reverse,
        }
    }

    pub(crate) fn rows(&self) -> usize {
        self.lengths.iter().sum()
    }

    pub(crate) fn sentences(&self) -> usize {
        self.lengths.len()
    }

    /// `(sentence, row)` for every sentence still running at `step`.
    fn active(&self, step: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.lengths
            .iter()
            .enumerate()
            .filter(move |(_, &l)| l > step)
            .map(move |(b, &l)| (b, self.offsets[b] + position(step, l, self.reverse)))
    }

    /// Row holding the state that precedes `step` of sentence `b`, or `None`
    /// at the first step.
    fn previous(&self, b: usize, step: usize) -> Option<usize> {
        (step > 0).then(|| self.offsets[b] + position(step - 1, self.lengths[b], self.reverse))
    }
}

pub(crate) struct LstmCache<T> {
    pack: Packing,
    /// activated gates i, f, g, o per row, [N × 4H]
    gates: Vec<T>,
    /// tanh(c) per row, [N × H]
    tanh_c: Vec<T>,
}

// Copies the state preceding `step` of every active sentence into `dst`,
// reading `width` values at column `col` of the `stride`-wide rows of `out`
// or the sentence's initial state.
#[allow(clippy::too_many_arguments)]
fn gather<T: Real>(
    dst: &mut Vec<T>,
    pack: &Packing,
    active: &[(usize, usize)],
    step: usize,
    out: &[T],
    stride: usize,
    col: usize,
    init: &[T],
    width: usize,
) {
    dst.clear();
    for &(b, _) in active {
        match pack.previous(b, step) {
            Some(p) => dst.extend_from_slice(&out[p * stride + col..p * stride + col + width]),
            None => dst.extend_from_slice(&init[b * width..(b + 1) * width]),
        }
    }
}

/// Returns rows `[h_t | c_t]` (`[N × 2H]`) and the activations needed by the
/// backward pass. `h0` and `c0` hold one `[H]` row per sentence.
pub(crate) fn lstm_forward<T: Real>(
    xp: &[T],
    w_hh: &[T],
    h0: &[T],
    c0: &[T],
    h: usize,
    pack: Packing,
) -> (Vec<T>, LstmCache<T>) {
    let rows = pack.rows();
    let mut out = vec![T::zero(); rows * 2 * h];
    let mut gates = vec![T::zero(); rows * 4 * h];
    let mut tanh_c = vec![T::zero(); rows * h];
    let (mut hs, mut cs, mut pre, mut active) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for step in 0..pack.longest {
        active.clear();
        active.extend(pack.active(step));
        let a = active.len();
        gather(&mut hs, &pack, &active, step, &out, 2 * h, 0, h0, h);
        gather(&mut cs, &pack, &active, step, &out, 2 * h, h, c0, h);
        pre.resize(a * 4 * h, T::zero());
        gemm_nt(&hs, w_hh, a, 4 * h, h, &mut pre);
        for (k, &(_, t)) in active.iter().enumerate() {
            let pre = &mut pre[k * 4 * h..(k + 1) * 4 * h];
            let x = &xp[t * 4 * h..(t + 1) * 4 * h];
            for j in 0..4 * h {
                pre[j] = x[j] + pre[j];
            }
            let gt = &mut gates[t * 4 * h..(t + 1) * 4 * h];
            activate(Activation::Sigmoid, &pre[..2 * h], &mut gt[..2 * h]);
            activate(Activation::Tanh, &pre[2 * h..3 * h], &mut gt[2 * h..3 * h]);
            activate(Activation::Sigmoid, &pre[3 * h..], &mut gt[3 * h..]);
            let c_prev = &cs[k * h..(k + 1) * h];
            let row = &mut out[t * 2 * h..(t + 1) * 2 * h];
            for j in 0..h {
                row[h + j] = gt[h + j] * c_prev[j] + gt[j] * gt[2 * h + j];
            }
            let tc = &mut tanh_c[t * h..(t + 1) * h];
            activate(Activation::Tanh, &row[h..], tc);
            for j in 0..h {
                row[j] = gt[3 * h + j] * tc[j];
            }
        }
    }
    (
        out,
        LstmCache {
            pack,
            gates,
            tanh_c,
        },
    )
}

pub(crate) struct LstmGrads<'s, T> {
    pub xp: Option<&'s mut [T]>,
    pub w_hh: Option<&'s mut [T]>,
    pub h0: Option<&'s mut [T]>,
    pub c0: Option<&'s mut [T]>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn lstm_backward<T: Real>(
    w_hh: &[T],
    h0: &[T],
    c0: &[T],
    h: usize,
    out: &[T],
    cache: &LstmCache<T>,
    g_out: &[T],
    grads: LstmGrads<'_, T>,
) {
    let pack = &cache.pack;
    let rows = pack.rows();
    let LstmGrads {
        mut xp,
        w_hh: gw,
        h0: gh0,
        c0: gc0,
    } = grads;
    let w_t = transpose(w_hh, 4 * h, h);
    // per-row carries: gradient flowing into the state stored at that row
    // from later steps, and the same for each sentence's initial state
    let mut dh_row = vec![T::zero(); rows * h];
    let mut dc_row = vec![T::zero(); rows * h];
    let mut dh_init = vec![T::zero(); pack.sentences() * h];
    let mut dc_init = vec![T::zero(); pack.sentences() * h];
    let need_w = gw.is_some();
    let mut dpre_all = if need_w {
        Vec::with_capacity(rows * 4 * h)
    } else {
        Vec::new()
    };
    let mut hprev_all = if need_w {
        Vec::with_capacity(rows * h)
    } else {
        Vec::new()
    };
    let (mut hs, mut cs, mut dpre, mut dh, mut active) =
        (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let one = T::one();
    for step in (0..pack.longest).rev() {
        active.clear();
        active.extend(pack.active(step));
        let a = active.len();
        gather(&mut hs, pack, &active, step, out, 2 * h, 0, h0, h);
        gather(&mut cs, pack, &active, step, out, 2 * h, h, c0, h);
        dpre.resize(a * 4 * h, T::zero());
        let mut dc_prev = vec![T::zero(); a * h];
        for (k, &(_, t)) in active.iter().enumerate() {
            let gt = &cache.gates[t * 4 * h..(t + 1) * 4 * h];
            let tc = &cache.tanh_c[t * h..(t + 1) * h];
            let go = &g_out[t * 2 * h..(t + 1) * 2 * h];
            let c_prev = &cs[k * h..(k + 1) * h];
            let dp = &mut dpre[k * 4 * h..(k + 1) * 4 * h];
            for j in 0..h {
                let (i, f, g, o) = (gt[j], gt[h + j], gt[2 * h + j], gt[3 * h + j]);
                let dhj = dh_row[t * h + j] + go[j];
                let dcj = dc_row[t * h + j] + go[h + j] + dhj * o * (one - tc[j] * tc[j]);
                dp[j] = dcj * g * i * (one - i);
                dp[h + j] = dcj * c_prev[j] * f * (one - f);
                dp[2 * h + j] = dcj * i * (one - g * g);
                dp[3 * h + j] = dhj * tc[j] * o * (one - o);
                dc_prev[k * h + j] = dcj * f;
            }
            if let Some(gx) = xp.as_deref_mut() {
                let gx = &mut gx[t * 4 * h..(t + 1) * 4 * h];
                for j in 0..4 * h {
                    gx[j] = gx[j] + dp[j];
                }
            }
        }
        dh.resize(a * h, T::zero());
        gemm_nt(&dpre, &w_t, a, h, 4 * h, &mut dh);
        for (k, &(b, _)) in active.iter().enumerate() {
            let (dst_h, dst_c) = match pack.previous(b, step) {
                Some(p) => (
                    &mut dh_row[p * h..(p + 1) * h],
                    &mut dc_row[p * h..(p + 1) * h],
                ),
                None => (
                    &mut dh_init[b * h..(b + 1) * h],
                    &mut dc_init[b * h..(b + 1) * h],
                ),
            };
            dst_h.copy_from_slice(&dh[k * h..(k + 1) * h]);
            dst_c.copy_from_slice(&dc_prev[k * h..(k + 1) * h]);
        }
        if need_w {
            dpre_all.extend_from_slice(&dpre);
            hprev_all.extend_from_slice(&hs);
        }
    }
    if let Some(gw) = gw {
        outer_accumulate(&dpre_all, &hprev_all, gw, rows, h, 4 * h);
    }
    for (dst, src) in [(gh0, &dh_init), (gc0, &dc_init)] {
        if let Some(g) = dst {
            for (gj, &v) in g.iter_mut().zip(src.iter()) {
                *gj = *gj + v;
            }
        }
    }
}

pub(crate) struct GruCache<T> {
    pack: Packing,
    /// z, r per row, [N × 2H]
    zr: Vec<T>,
    /// candidate h̃ per row, [N × H]
    cand: Vec<T>,
    /// r ⊙ h_prev per row, [N × H]
    rh: Vec<T>,
}

/// Returns hidden states `[N × H]`; `h0` holds one `[H]` row per sentence.
pub(crate) fn gru_forward<T: Real>(
    xp: &[T],
    w_hh: &[T],
    w_hn: &[T],
    h0: &[T],
    h: usize,
    pack: Packing,
) -> (Vec<T>, GruCache<T>) {
    let rows = pack.rows();
    let mut out = vec![T::zero(); rows * h];
    let mut zr = vec![T::zero(); rows * 2 * h];
    let mut cand = vec![T::zero(); rows * h];
    let mut rh = vec![T::zero(); rows * h];
    let (mut hs, mut hzr, mut rhs, mut hn, mut active) =
        (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for step in 0..pack.longest {
        active.clear();
        active.extend(pack.active(step));
        let a = active.len();
        gather(&mut hs, &pack, &active, step, &out, h, 0, h0, h);
        hzr.resize(a * 2 * h, T::zero());
        gemm_nt(&hs, w_hh, a, 2 * h, h, &mut hzr);
        rhs.clear();
        for (k, &(_, t)) in active.iter().enumerate() {
            let x = &xp[t * 3 * h..(t + 1) * 3 * h];
            let pre = &mut hzr[k * 2 * h..(k + 1) * 2 * h];
            for j in 0..2 * h {
                pre[j] = x[j] + pre[j];
            }
            let zrt = &mut zr[t * 2 * h..(t + 1) * 2 * h];
            activate(Activation::Sigmoid, pre, zrt);
            let h_prev = &hs[k * h..(k + 1) * h];
            let rht = &mut rh[t * h..(t + 1) * h];
            for j in 0..h {
                rht[j] = zrt[h + j] * h_prev[j];
            }
            rhs.extend_from_slice(rht);
        }
        hn.resize(a * h, T::zero());
        gemm_nt(&rhs, w_hn, a, h, h, &mut hn);
        for (k, &(_, t)) in active.iter().enumerate() {
            let x = &xp[t * 3 * h..(t + 1) * 3 * h];
            let hn = &mut hn[k * h..(k + 1) * h];
            for j in 0..h {
                hn[j] = x[2 * h + j] + hn[j];
            }
            let ct = &mut cand[t * h..(t + 1) * h];
            activate(Activation::Tanh, hn, ct);
            let h_prev = &hs[k * h..(k + 1) * h];
            let zrt = &zr[t * 2 * h..(t + 1) * 2 * h];
            let row = &mut out[t * h..(t + 1) * h];
            for j in 0..h {
                let z = zrt[j];
                row[j] = (T::one() - z) * h_prev[j] + z * ct[j];
            }
        }
    }
    (out, GruCache { pack, zr, cand, rh })
}

pub(crate) struct GruGrads<'s, T> {
    pub xp: Option<&'s mut [T]>,
    pub w_hh: Option<&'s mut [T]>,
    pub w_hn: Option<&'s mut [T]>,
    pub h0: Option<&'s mut [T]>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn gru_backward<T: Real>(
    w_hh: &[T],
    w_hn: &[T],
    h0: &[T],
    h: usize,
    out: &[T],
    cache: &GruCache<T>,
    g_out: &[T],
    grads: GruGrads<'_, T>,
) {
    let pack = &cache.pack;
    let rows = pack.rows();
    let GruGrads {
        mut xp,
        w_hh: gw_hh,
        w_hn: gw_hn,
        h0: gh0,
    } = grads;
    let whh_t = transpose(w_hh, 2 * h, h);
    let whn_t = transpose(w_hn, h, h);
    let mut dh_row = vec![T::zero(); rows * h];
    let mut dh_init = vec![T::zero(); pack.sentences() * h];
    let need_hh = gw_hh.is_some();
    let need_hn = gw_hn.is_some();
    let mut dzr_all = Vec::new();
    let mut hprev_all = Vec::new();
    let mut dcp_all = Vec::new();
    let mut rh_all = Vec::new();
    let (mut hs, mut dzr, mut dcp, mut drh, mut dh, mut active) = (
        Vec::new(),
        Vec::new(),
        Vec::new(),
        Vec::new(),
        Vec::new(),
        Vec::new(),
    );
    let one = T::one();
    for step in (0..pack.longest).rev() {
        active.clear();
        active.extend(pack.active(step));
        let a = active.len();
        gather(&mut hs, pack, &active, step, out, h, 0, h0, h);
        dzr.resize(a * 2 * h, T::zero());
        dcp.resize(a * h, T::zero());
        let mut dh_direct = vec![T::zero(); a * h];
        for (k, &(_, t)) in active.iter().enumerate() {
            let zrt = &cache.zr[t * 2 * h..(t + 1) * 2 * h];
            let ct = &cache.cand[t * h..(t + 1) * h];
            let go = &g_out[t * h..(t + 1) * h];
            let h_prev = &hs[k * h..(k + 1) * h];
            for j in 0..h {
                let dhj = dh_row[t * h + j] + go[j];
                let z = zrt[j];
                dzr[k * 2 * h + j] = dhj * (ct[j] - h_prev[j]) * z * (one - z);
                dcp[k * h + j] = dhj * z * (one - ct[j] * ct[j]);
                dh_direct[k * h + j] = dhj * (one - z);
            }
        }
        drh.resize(a * h, T::zero());
        gemm_nt(&dcp, &whn_t, a, h, h, &mut drh);
        for (k, &(_, t)) in active.iter().enumerate() {
            let zrt = &cache.zr[t * 2 * h..(t + 1) * 2 * h];
            let h_prev = &hs[k * h..(k + 1) * h];
            for j in 0..h {
                let r = zrt[h + j];
                let d = drh[k * h + j];
                dzr[k * 2 * h + h + j] = d * h_prev[j] * r * (one - r);
                dh_direct[k * h + j] = dh_direct[k * h + j] + d * r;
            }
            if let Some(gx) = xp.as_deref_mut() {
                let gx = &mut gx[t * 3 * h..(t + 1) * 3 * h];
                for j in 0..2 * h {
                    gx[j] = gx[j] + dzr[k * 2 * h + j];
                }
                for j in 0..h {
                    gx[2 * h + j] = gx[2 * h + j] + dcp[k * h + j];
                }
            }
        }
        dh.resize(a * h, T::zero());
        gemm_nt(&dzr, &whh_t, a, h, 2 * h, &mut dh);
        for (k, &(b, _)) in active.iter().enumerate() {
            let dst = match pack.previous(b, step) {
                Some(p) => &mut dh_row[p * h..(p + 1) * h],
                None => &mut dh_init[b * h..(b + 1) * h],
            };
            for j in 0..h {
                dst[j] = dh_direct[k * h + j] + dh[k * h + j];
            }
        }
        if need_hh {
            dzr_all.extend_from_slice(&dzr);
            hprev_all.extend_from_slice(&hs);
        }
        if need_hn {
            dcp_all.extend_from_slice(&dcp);
            for &(_, t) in &active {
                rh_all.extend_from_slice(&cache.rh[t * h..(t + 1) * h]);
            }
        }
    }
    if let Some(gw) = gw_hh {
        outer_accumulate(&dzr_all, &hprev_all, gw, rows, h, 2 * h);
    }
    if let Some(gw) = gw_hn {
        outer_accumulate(&dcp_all, &rh_all, gw, rows, h, h);
    }
    if let Some(g) = gh0 {
        for (gj, &v) in g.iter_mut().zip(dh_init.iter()) {
            *gj = *gj + v;
        }
    }
}
