use serde::{Deserialize, Serialize};

use crate::diffcore::{Bindings, Graph, Tensor, Var};
use crate::error::{Error, Result};

use super::EmbedderSuite;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormLossWeights {
    pub rec: f64,
    pub perc: f64,
    pub id: f64,
    pub lm: f64,
    pub exp: f64,
    pub eye: f64,
}

impl Default for NormLossWeights {
    fn default() -> Self {
        NormLossWeights { rec: 10.0, perc: 5.0, id: 10.0, lm: 5000.0, exp: 5000.0, eye: 10.0 }
    }
}

impl NormLossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.rec, self.perc, self.id, self.lm, self.exp, self.eye];
        if all.iter().any(|w| w.is_nan() || *w < 0.0) {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Batch means of the seven terms and the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NormLossBreakdown {
    pub adv: f64,
    pub rec: f64,
    pub perc: f64,
    pub id: f64,
    pub lm: f64,
    pub exp: f64,
    pub eye: f64,
    pub total: f64,
}

impl NormLossBreakdown {
    pub fn weighted_sum(&self, w: &NormLossWeights) -> f64 {
        self.adv
            + w.rec * self.rec
            + w.perc * self.perc
            + w.id * self.id
            + w.lm * self.lm
            + w.exp * self.exp
            + w.eye * self.eye
    }

    pub fn terms(&self) -> [(&'static str, f64); 8] {
        [
            ("adv", self.adv),
            ("rec", self.rec),
            ("perc", self.perc),
            ("id", self.id),
            ("lm", self.lm),
            ("exp", self.exp),
            ("eye", self.eye),
            ("total", self.total),
        ]
    }
}

fn mean_distance(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let d = g.sub(a, b)?;
    let n = g.row_norm(d);
    g.mean(n)
}

/// Generator objective. `rec_mask[b]` marks pairs forced to `I_o = I_t`;
/// only those contribute the reconstruction term. The discriminator is read
/// through `disc` (bind it frozen for a generator step).
#[allow(clippy::too_many_arguments)]
pub fn norm_loss(
    g: &mut Graph,
    i_o: Var,
    i_t: Var,
    i_n: Var,
    rec_mask: &[bool],
    suite: &EmbedderSuite,
    disc: &Bindings,
    weights: &NormLossWeights,
) -> Result<(Var, NormLossBreakdown)> {
    let (b, _) = g.shape(i_n);
    if g.shape(i_o) != g.shape(i_n) || g.shape(i_t) != g.shape(i_n) {
        return Err(Error::Dimension { op: "norm_loss", lhs: g.shape(i_o), rhs: g.shape(i_n) });
    }
    if rec_mask.len() != b {
        return Err(Error::LengthMismatch(rec_mask.len(), b));
    }

    let pair = g.concat_cols(&[i_t, i_n])?;
    let scores = suite.discriminator.score(g, disc, pair)?;
    let mean_score = g.mean(scores)?;
    let adv = g.scale(mean_score, -1.0);

    let diff = g.sub(i_n, i_t)?;
    let dist = g.row_norm(diff);
    let mask = Tensor::from_vec(b, 1, rec_mask.iter().map(|&m| m as u8 as f64).collect())?;
    let mask = g.constant(mask);
    let masked = g.mul(dist, mask)?;
    let rec = g.mean(masked)?;

    let p_t = suite.perceptual.embed(g, i_t)?;
    let p_n = suite.perceptual.embed(g, i_n)?;
    let perc = mean_distance(g, p_t, p_n)?;

    let id_t = suite.identity.embed(g, i_t)?;
    let id_n = suite.identity.embed(g, i_n)?;
    let cos = g.row_cosine(id_t, id_n)?;
    let mean_cos = g.mean(cos)?;
    let neg = g.scale(mean_cos, -1.0);
    let id = g.add_scalar(neg, 1.0);

    let c_t = suite.contour.embed(g, i_t)?;
    let c_n = suite.contour.embed(g, i_n)?;
    let lm = mean_distance(g, c_t, c_n)?;

    let x_o = suite.expression.embed(g, i_o)?;
    let x_n = suite.expression.embed(g, i_n)?;
    let exp = mean_distance(g, x_o, x_n)?;

    let b_o = suite.eyebrow.embed(g, i_o)?;
    let b_n = suite.eyebrow.embed(g, i_n)?;
    let eye = mean_distance(g, b_o, b_n)?;

    let mut total = adv;
    for (term, w) in [
        (rec, weights.rec),
        (perc, weights.perc),
        (id, weights.id),
        (lm, weights.lm),
        (exp, weights.exp),
        (eye, weights.eye),
    ] {
        let scaled = g.scale(term, w);
        total = g.add(total, scaled)?;
    }

    let breakdown = NormLossBreakdown {
        adv: g.scalar(adv),
        rec: g.scalar(rec),
        perc: g.scalar(perc),
        id: g.scalar(id),
        lm: g.scalar(lm),
        exp: g.scalar(exp),
        eye: g.scalar(eye),
        total: g.scalar(total),
    };
    Ok((total, breakdown))
}

/// Hinge discriminator objective
/// `mean(relu(1 − D(real))) + mean(relu(1 + D(fake)))`.
pub fn discriminator_loss(g: &mut Graph, real_scores: Var, fake_scores: Var) -> Result<Var> {
    let neg_real = g.scale(real_scores, -1.0);
    let r = g.add_scalar(neg_real, 1.0);
    let r = g.relu(r);
    let r = g.mean(r)?;
    let f = g.add_scalar(fake_scores, 1.0);
    let f = g.relu(f);
    let f = g.mean(f)?;
    g.add(r, f)
}
