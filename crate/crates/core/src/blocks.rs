//! Mutual non-local co-attention and squeeze-and-co-excitation.
//!
//! Feature maps are `N×H×W` tensors. The non-local block uses the
//! embedded-Gaussian pairwise function with an `N/2` bottleneck:
//!
//! ```text
//! θ = W_θ·x + b_θ        (N/2 × L_x)
//! φ = W_φ·r + b_φ        (N/2 × L_r)
//! g = W_g·r + b_g        (N/2 × L_r)
//! A = softmax_rows(θᵀφ)  (L_x × L_r)
//! ψ = W_o·(A·gᵀ)ᵀ + b_o  (N × L_x)
//! ```
//!
//! `W_o` and `b_o` start at zero so a fresh block adds nothing to its input.

use crate::error::{Error, Result};
use crate::nn::{dense, init_bias, init_weight, BoundParams, Init};
use crate::tensor::{ParamStore, Tape, Var};

#[derive(Debug, Clone, Copy)]
pub struct NonLocalParams {
    pub theta_w: Var,
    pub theta_b: Var,
    pub phi_w: Var,
    pub phi_b: Var,
    pub g_w: Var,
    pub g_b: Var,
    pub out_w: Var,
    pub out_b: Var,
}

impl NonLocalParams {
    pub fn from_bound(p: &BoundParams, prefix: &str) -> Result<Self> {
        let v = |s: &str| p.get(&format!("{prefix}.{s}"));
        Ok(Self {
            theta_w: v("theta.weight")?,
            theta_b: v("theta.bias")?,
            phi_w: v("phi.weight")?,
            phi_b: v("phi.bias")?,
            g_w: v("g.weight")?,
            g_b: v("g.bias")?,
            out_w: v("out.weight")?,
            out_b: v("out.bias")?,
        })
    }

    /// Adds a block's parameters under `prefix`; the output projection is zero.
    pub fn init(store: &mut ParamStore, prefix: &str, channels: usize, seed: u64) -> Result<()> {
        if channels < 2 || !channels.is_multiple_of(2) {
            return Err(Error::config(format!(
                "non-local block needs an even channel count, got {channels}"
            )));
        }
        let inner = channels / 2;
        for part in ["theta", "phi", "g"] {
            let name = format!("{prefix}.{part}.weight");
            init_weight(
                store,
                &name,
                &[inner, channels],
                channels,
                Init::LecunUniform,
                seed,
            );
            init_bias(store, &format!("{prefix}.{part}.bias"), inner);
        }
        init_weight(
            store,
            &format!("{prefix}.out.weight"),
            &[channels, inner],
            inner,
            Init::Zeros,
            seed,
        );
        init_bias(store, &format!("{prefix}.out.bias"), channels);
        Ok(())
    }
}

pub struct NonLocalOutput {
    /// ψ, shaped like the input map.
    pub psi: Var,
    /// Attention weights, `L_input × L_reference`, rows summing to one.
    pub attention: Var,
}

fn flatten(tape: &mut Tape, map: Var) -> Result<(Var, [usize; 3])> {
    let s = tape.value(map).shape().to_vec();
    if s.len() != 3 {
        return Err(Error::dim(format!("feature map must be N×H×W, got {s:?}")));
    }
    let v = tape.reshape(map, &[s[0], s[1] * s[2]])?;
    Ok((v, [s[0], s[1], s[2]]))
}

/// Non-local operation on `input` with `reference` as the attended map.
pub fn non_local_cross(
    tape: &mut Tape,
    input: Var,
    reference: Var,
    p: &NonLocalParams,
) -> Result<NonLocalOutput> {
    let (x, xs) = flatten(tape, input)?;
    let (r, rs) = flatten(tape, reference)?;
    if xs[0] != rs[0] {
        return Err(Error::dim(format!(
            "non-local: input has {} channels but reference has {}",
            xs[0], rs[0]
        )));
    }
    let theta = dense(tape, p.theta_w, p.theta_b, x)?;
    let phi = dense(tape, p.phi_w, p.phi_b, r)?;
    let g = dense(tape, p.g_w, p.g_b, r)?;
    let theta_t = tape.transpose(theta)?;
    let scores = tape.matmul(theta_t, phi)?;
    let attention = tape.softmax(scores, 1)?;
    let g_t = tape.transpose(g)?;
    let y = tape.matmul(attention, g_t)?;
    let y_t = tape.transpose(y)?;
    let out = dense(tape, p.out_w, p.out_b, y_t)?;
    let psi = tape.reshape(out, &xs)?;
    Ok(NonLocalOutput { psi, attention })
}

/// `F(I) = φ(I) ⊕ ψ(I; p)` and `F(p) = φ(p) ⊕ ψ(p; I)`, with independent
/// parameters for the two directions.
pub fn co_attention_extend(
    tape: &mut Tape,
    phi_i: Var,
    phi_p: Var,
    params_ip: &NonLocalParams,
    params_pi: &NonLocalParams,
) -> Result<(Var, Var)> {
    let psi_i = non_local_cross(tape, phi_i, phi_p, params_ip)?.psi;
    let psi_p = non_local_cross(tape, phi_p, phi_i, params_pi)?.psi;
    let fi = tape.add(phi_i, psi_i)?;
    let fp = tape.add(phi_p, psi_p)?;
    Ok((fi, fp))
}

/// What the excitation MLP sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SceInput {
    /// `GAP(F(p))` only.
    #[default]
    Query,
    /// `GAP(F(p)) ⊕ GAP(F(I))` (concatenated, `2N` inputs).
    QueryAndTarget,
}

impl SceInput {
    pub fn as_str(self) -> &'static str {
        match self {
            SceInput::Query => "query",
            SceInput::QueryAndTarget => "query_target",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "query" => Some(SceInput::Query),
            "query_target" => Some(SceInput::QueryAndTarget),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SceParams {
    pub fc1_w: Var,
    pub fc1_b: Var,
    pub fc2_w: Var,
    pub fc2_b: Var,
    pub input: SceInput,
}

impl SceParams {
    pub fn from_bound(p: &BoundParams, prefix: &str, input: SceInput) -> Result<Self> {
        let v = |s: &str| p.get(&format!("{prefix}.{s}"));
        Ok(Self {
            fc1_w: v("fc1.weight")?,
            fc1_b: v("fc1.bias")?,
            fc2_w: v("fc2.weight")?,
            fc2_b: v("fc2.bias")?,
            input,
        })
    }

    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        reduction: usize,
        input: SceInput,
        seed: u64,
    ) -> Result<()> {
        if reduction == 0 || !channels.is_multiple_of(reduction) {
            return Err(Error::config(format!(
                "reduction ratio {reduction} does not divide {channels} channels"
            )));
        }
        let hidden = channels / reduction;
        let fan_in = match input {
            SceInput::Query => channels,
            SceInput::QueryAndTarget => 2 * channels,
        };
        init_weight(
            store,
            &format!("{prefix}.fc1.weight"),
            &[hidden, fan_in],
            fan_in,
            Init::HeUniform,
            seed,
        );
        init_bias(store, &format!("{prefix}.fc1.bias"), hidden);
        init_weight(
            store,
            &format!("{prefix}.fc2.weight"),
            &[channels, hidden],
            hidden,
            Init::LecunUniform,
            seed,
        );
        init_bias(store, &format!("{prefix}.fc2.bias"), channels);
        Ok(())
    }
}

pub struct CoExcitation {
    /// `w ∈ (0,1)^N`.
    pub w: Var,
    pub fp_tilde: Var,
    pub fi_tilde: Var,
}

/// `w = σ(fc2(relu(fc1(GAP(F(p))))))`, then `F̃(p) = w ⊙ F(p)`, `F̃(I) = w ⊙ F(I)`.
pub fn squeeze_co_excitation(
    tape: &mut Tape,
    fp: Var,
    fi: Var,
    p: &SceParams,
) -> Result<CoExcitation> {
    let n = tape.value(fp).shape()[0];
    if tape.value(fi).shape()[0] != n {
        return Err(Error::dim(format!(
            "co-excitation: F(p) has {n} channels but F(I) has {}",
            tape.value(fi).shape()[0]
        )));
    }
    let gp = tape.global_avg_pool(fp)?;
    let squeezed = match p.input {
        SceInput::Query => gp,
        SceInput::QueryAndTarget => {
            let gi = tape.global_avg_pool(fi)?;
            tape.concat(&[gp, gi], 0)?
        }
    };
    let len = tape.value(squeezed).numel();
    let col = tape.reshape(squeezed, &[len, 1])?;
    let h = dense(tape, p.fc1_w, p.fc1_b, col)?;
    let h = tape.relu(h)?;
    let z = dense(tape, p.fc2_w, p.fc2_b, h)?;
    let z = tape.reshape(z, &[n])?;
    let w = tape.sigmoid(z)?;
    let fp_tilde = tape.channel_mul(fp, w)?;
    let fi_tilde = tape.channel_mul(fi, w)?;
    Ok(CoExcitation {
        w,
        fp_tilde,
        fi_tilde,
    })
}

/// `q = GAP(F̃(p))`.
pub fn query_embedding(tape: &mut Tape, fp_tilde: Var) -> Result<Var> {
    tape.global_avg_pool(fp_tilde)
}

/// A co-excitation vector pulled off the tape.
#[derive(Debug, Clone, PartialEq)]
pub struct CoExcitationVector(pub Vec<f64>);

impl CoExcitationVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn distance(&self, other: &CoExcitationVector) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}
