use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;

use super::uniform_init;

/// Single LSTM layer, gate order (input, forget, cell, output).
#[derive(Debug, Clone, PartialEq)]
pub struct Lstm {
    /// `[4H, input]`
    pub w_ih: Array2<f64>,
    /// `[4H, H]`
    pub w_hh: Array2<f64>,
    pub bias: Array1<f64>,
}

struct Step {
    x: Array2<f64>,
    h_prev: Array2<f64>,
    c_prev: Array2<f64>,
    i: Array2<f64>,
    f: Array2<f64>,
    g: Array2<f64>,
    o: Array2<f64>,
    tanh_c: Array2<f64>,
}

pub struct LstmCache {
    steps: Vec<Step>,
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

impl Lstm {
    pub fn new<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        Lstm {
            w_ih: Array2::from_shape_vec((4 * hidden, input), uniform_init(rng, 4 * hidden * input, bound)).unwrap(),
            w_hh: Array2::from_shape_vec((4 * hidden, hidden), uniform_init(rng, 4 * hidden * hidden, bound)).unwrap(),
            bias: Array1::from(uniform_init(rng, 4 * hidden, bound)),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_hh.ncols()
    }

    pub fn input(&self) -> usize {
        self.w_ih.ncols()
    }

    /// Runs over `xs` (one `[B, input]` matrix per time step) from zero
    /// state; returns the hidden state at every step.
    pub fn forward(&self, xs: &[Array2<f64>]) -> (Vec<Array2<f64>>, LstmCache) {
        let hd = self.hidden();
        let b = xs.first().map_or(0, |x| x.nrows());
        let mut h = Array2::zeros((b, hd));
        let mut c = Array2::zeros((b, hd));
        let mut outs = Vec::with_capacity(xs.len());
        let mut steps = Vec::with_capacity(xs.len());
        for x in xs {
            let gates = x.dot(&self.w_ih.t()) + h.dot(&self.w_hh.t()) + &self.bias;
            let i = gates.slice(s![.., 0..hd]).mapv(sigmoid);
            let f = gates.slice(s![.., hd..2 * hd]).mapv(sigmoid);
            let g = gates.slice(s![.., 2 * hd..3 * hd]).mapv(f64::tanh);
            let o = gates.slice(s![.., 3 * hd..4 * hd]).mapv(sigmoid);
            let c_new = &f * &c + &i * &g;
            let tanh_c = c_new.mapv(f64::tanh);
            let h_new = &o * &tanh_c;
            steps.push(Step {
                x: x.clone(),
                h_prev: h,
                c_prev: c,
                i,
                f,
                g,
                o,
                tanh_c,
            });
            outs.push(h_new.clone());
            h = h_new;
            c = c_new;
        }
        (outs, LstmCache { steps })
    }

    /// Back-propagation through time given `d loss / d h_t` for every step.
    /// Returns `d loss / d x_t` for every step.
    pub fn backward(&self, cache: &LstmCache, dhs: &[Array2<f64>], mut grad: Option<&mut Lstm>) -> Vec<Array2<f64>> {
        let hd = self.hidden();
        let b = dhs.first().map_or(0, |d| d.nrows());
        let mut dh_next = Array2::<f64>::zeros((b, hd));
        let mut dc_next = Array2::<f64>::zeros((b, hd));
        let mut dxs = vec![Array2::zeros((0, 0)); dhs.len()];
        let mut dgates = Array2::zeros((b, 4 * hd));
        for t in (0..cache.steps.len()).rev() {
            let st = &cache.steps[t];
            let dh = &dhs[t] + &dh_next;
            let d_o = &dh * &st.tanh_c;
            let dc = &dh * &st.o * &st.tanh_c.mapv(|v| 1.0 - v * v) + &dc_next;
            let di = &dc * &st.g;
            let dg = &dc * &st.i;
            let df = &dc * &st.c_prev;
            dc_next = &dc * &st.f;
            dgates.slice_mut(s![.., 0..hd]).assign(&(&di * &st.i.mapv(|v| v * (1.0 - v))));
            dgates.slice_mut(s![.., hd..2 * hd]).assign(&(&df * &st.f.mapv(|v| v * (1.0 - v))));
            dgates.slice_mut(s![.., 2 * hd..3 * hd]).assign(&(&dg * &st.g.mapv(|v| 1.0 - v * v)));
            dgates.slice_mut(s![.., 3 * hd..4 * hd]).assign(&(&d_o * &st.o.mapv(|v| v * (1.0 - v))));
            if let Some(g) = grad.as_deref_mut() {
                g.w_ih += &dgates.t().dot(&st.x);
                g.w_hh += &dgates.t().dot(&st.h_prev);
                g.bias += &dgates.sum_axis(Axis(0));
            }
            dxs[t] = dgates.dot(&self.w_ih);
            dh_next = dgates.dot(&self.w_hh);
        }
        dxs
    }
}
