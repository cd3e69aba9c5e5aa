//! Prototype matching primitives and the branch-1 self-matching pass.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{DarnetError, Result};
use crate::feature::FeatureMap;

pub const COSINE_EPS: f64 = 1e-8;

/// Paired foreground/background class prototypes.
///
/// A zero count marks the corresponding vector as invalid.
#[derive(Debug, Clone, PartialEq)]
pub struct Prototype {
    pub fg: Array1<f64>,
    pub bg: Array1<f64>,
    pub fg_count: usize,
    pub bg_count: usize,
}

impl Prototype {
    pub fn new(fg: Array1<f64>, bg: Array1<f64>) -> Self {
        Self {
            fg,
            bg,
            fg_count: 1,
            bg_count: 1,
        }
    }

    pub fn fg_valid(&self) -> bool {
        self.fg_count > 0
    }

    pub fn bg_valid(&self) -> bool {
        self.bg_count > 0
    }

    pub fn is_complete(&self) -> bool {
        self.fg_valid() && self.bg_valid()
    }

    pub fn channels(&self) -> usize {
        self.fg.len()
    }
}

/// Per-pixel two-way foreground/background probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceMap {
    pub fg: Array2<f64>,
    pub bg: Array2<f64>,
}

impl ConfidenceMap {
    /// Builds a map from foreground probabilities; background is the complement.
    pub fn from_fg(fg: Array2<f64>) -> Self {
        let bg = fg.mapv(|p| 1.0 - p);
        Self { fg, bg }
    }

    pub fn uniform(h: usize, w: usize) -> Self {
        Self::from_fg(Array2::from_elem((h, w), 0.5))
    }

    pub fn dim(&self) -> (usize, usize) {
        self.fg.dim()
    }

    /// Largest deviation of fg+bg from 1 over all pixels.
    pub fn normalization_error(&self) -> f64 {
        Zip::from(&self.fg)
            .and(&self.bg)
            .fold(0.0f64, |acc, &f, &b| acc.max((f + b - 1.0).abs()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    Fg,
    Bg,
    Lost,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TernaryMask {
    pub labels: Array2<Label>,
}

impl TernaryMask {
    pub fn dim(&self) -> (usize, usize) {
        self.labels.dim()
    }

    pub fn indicator(&self, label: Label) -> Array2<u8> {
        self.labels.mapv(|l| u8::from(l == label))
    }

    pub fn count(&self, label: Label) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }
}

/// Hyper-parameters of the matching head.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchConfig {
    /// Scale applied to cosine similarities before the softmax.
    pub temperature: f64,
    pub tau_fg: f64,
    pub tau_bg: f64,
    /// Weight of the support prototype in the self-matching blend.
    pub alpha: f64,
    /// Weight of the query prototype in the self-matching blend.
    pub beta: f64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            temperature: 10.0,
            tau_fg: 0.8,
            tau_bg: 0.6,
            alpha: 0.5,
            beta: 0.5,
        }
    }
}

/// Nearest-neighbour resize of a binary mask to feature resolution.
pub fn downsample_mask(mask: ArrayView2<'_, u8>, h: usize, w: usize) -> Array2<u8> {
    let (mh, mw) = mask.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let sy = (((y as f64 + 0.5) * mh as f64 / h as f64) as usize).min(mh - 1);
        let sx = (((x as f64 + 0.5) * mw as f64 / w as f64) as usize).min(mw - 1);
        mask[[sy, sx]]
    })
}

/// Mean feature column over pixels where `mask` is nonzero.
///
/// An empty mask yields a zero vector with count 0.
pub fn masked_average_pool(
    f: &FeatureMap,
    mask: ArrayView2<'_, u8>,
) -> Result<(Array1<f64>, usize)> {
    if mask.dim() != f.spatial() {
        return Err(DarnetError::ShapeMismatch(format!(
            "mask {:?} vs feature map {:?}",
            mask.dim(),
            f.spatial()
        )));
    }
    let data = f.data();
    let mut sum = Array1::zeros(f.channels());
    let mut count = 0usize;
    for ((y, x), &m) in mask.indexed_iter() {
        if m != 0 {
            sum += &data.slice(ndarray::s![.., y, x]);
            count += 1;
        }
    }
    if count > 0 {
        sum /= count as f64;
    }
    Ok((sum, count))
}

fn norm(v: ndarray::ArrayView1<'_, f64>) -> f64 {
    v.dot(&v).sqrt()
}

/// Cosine similarity between `p` and every pixel column of `f`.
pub fn cosine_map(p: &Array1<f64>, f: &FeatureMap) -> Result<Array2<f64>> {
    if p.len() != f.channels() {
        return Err(DarnetError::ChannelMismatch {
            expected: f.channels(),
            got: p.len(),
        });
    }
    let pn = norm(p.view());
    if pn == 0.0 || !pn.is_finite() {
        return Err(DarnetError::InvalidPrototype(
            "zero or non-finite prototype",
        ));
    }
    let (_, h, w) = f.data().dim();
    let m = f.as_matrix();
    let dots = p.dot(&m);
    let norms = m.map_axis(Axis(0), norm);
    let cos = Zip::from(&dots)
        .and(&norms)
        .map_collect(|&d, &n| d / (pn * n + COSINE_EPS));
    Ok(cos.into_shape_with_order((h, w)).expect("h*w"))
}

fn confidence_from_cosines(
    cos_fg: &Array2<f64>,
    cos_bg: &Array2<f64>,
    temperature: f64,
) -> ConfidenceMap {
    let fg = Zip::from(cos_fg)
        .and(cos_bg)
        .map_collect(|&a, &b| sigmoid(temperature * (a - b)));
    ConfidenceMap::from_fg(fg)
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Two-way softmax over temperature-scaled cosine similarities.
pub fn predict_confidence(
    p: &Prototype,
    f: &FeatureMap,
    temperature: f64,
) -> Result<ConfidenceMap> {
    if !p.is_complete() {
        return Err(DarnetError::InvalidPrototype("prototype half is empty"));
    }
    let cf = cosine_map(&p.fg, f)?;
    let cb = cosine_map(&p.bg, f)?;
    Ok(confidence_from_cosines(&cf, &cb, temperature))
}

/// Labels confident foreground and background pixels; the rest are lost.
///
/// A pixel that clears both thresholds takes the side with larger confidence
/// (ties go to background).
pub fn threshold_filter(cm: &ConfidenceMap, tau_fg: f64, tau_bg: f64) -> TernaryMask {
    let labels =
        Zip::from(&cm.fg)
            .and(&cm.bg)
            .map_collect(|&f, &b| match (f > tau_fg, b > tau_bg) {
                (true, true) if f > b => Label::Fg,
                (true, true) => Label::Bg,
                (true, false) => Label::Fg,
                (false, true) => Label::Bg,
                (false, false) => Label::Lost,
            });
    TernaryMask { labels }
}

/// Cosine between the foreground and background halves of a prototype.
pub fn fg_bg_similarity(p: &Prototype) -> Result<f64> {
    if !p.is_complete() {
        return Err(DarnetError::InvalidPrototype("prototype half is empty"));
    }
    let (nf, nb) = (norm(p.fg.view()), norm(p.bg.view()));
    Ok(p.fg.dot(&p.bg) / (nf * nb + COSINE_EPS))
}

/// Pools the query features under the FG and BG labels of `tm`.
pub fn build_query_prototype(f_q: &FeatureMap, tm: &TernaryMask) -> Result<Prototype> {
    let (fg, fg_count) = masked_average_pool(f_q, tm.indicator(Label::Fg).view())?;
    let (bg, bg_count) = masked_average_pool(f_q, tm.indicator(Label::Bg).view())?;
    if fg_count == 0 && bg_count == 0 {
        return Err(DarnetError::DegenerateEpisode(
            "no confident foreground or background pixels".into(),
        ));
    }
    Ok(Prototype {
        fg,
        bg,
        fg_count,
        bg_count,
    })
}

/// Support prototype from one or more (feature, mask) shots.
///
/// Each half is the mean of the per-shot prototypes that are valid for it.
pub fn support_prototype(shots: &[(&FeatureMap, ArrayView2<'_, u8>)]) -> Result<Prototype> {
    let channels = shots
        .first()
        .map(|(f, _)| f.channels())
        .ok_or_else(|| DarnetError::DegenerateEpisode("empty support set".into()))?;
    let mut fg = Array1::zeros(channels);
    let mut bg = Array1::zeros(channels);
    let (mut nf, mut nb, mut fg_count, mut bg_count) = (0usize, 0usize, 0usize, 0usize);
    for (f, m) in shots {
        let (pf, cf) = masked_average_pool(f, m.view())?;
        let inverted = m.mapv(|v| u8::from(v == 0));
        let (pb, cb) = masked_average_pool(f, inverted.view())?;
        if cf > 0 {
            fg += &pf;
            nf += 1;
            fg_count += cf;
        }
        if cb > 0 {
            bg += &pb;
            nb += 1;
            bg_count += cb;
        }
    }
    if nf > 0 {
        fg /= nf as f64;
    }
    if nb > 0 {
        bg /= nb as f64;
    }
    Ok(Prototype {
        fg,
        bg,
        fg_count,
        bg_count,
    })
}

fn blend_half(
    s: &Array1<f64>,
    s_valid: bool,
    q: &Array1<f64>,
    q_valid: bool,
    alpha: f64,
    beta: f64,
) -> Result<Array1<f64>> {
    match (s_valid, q_valid) {
        (true, true) => Ok(s * alpha + q * beta),
        (true, false) => Ok(s.clone()),
        (false, true) => Ok(q.clone()),
        (false, false) => Err(DarnetError::InvalidPrototype(
            "both support and query halves are empty",
        )),
    }
}

/// `alpha·p_s + beta·p_q_star`, falling back to whichever half is valid.
pub fn blend_prototypes(
    p_s: &Prototype,
    p_q_star: &Prototype,
    alpha: f64,
    beta: f64,
) -> Result<Prototype> {
    let fg = blend_half(
        &p_s.fg,
        p_s.fg_valid(),
        &p_q_star.fg,
        p_q_star.fg_valid(),
        alpha,
        beta,
    )?;
    let bg = blend_half(
        &p_s.bg,
        p_s.bg_valid(),
        &p_q_star.bg,
        p_q_star.bg_valid(),
        alpha,
        beta,
    )?;
    Ok(Prototype {
        fg,
        bg,
        fg_count: p_s.fg_count + p_q_star.fg_count,
        bg_count: p_s.bg_count + p_q_star.bg_count,
    })
}

/// Matches `f_q` against the blend of the support and query prototypes.
pub fn self_match(
    p_s: &Prototype,
    p_q_star: &Prototype,
    f_q: &FeatureMap,
    alpha: f64,
    beta: f64,
    temperature: f64,
) -> Result<ConfidenceMap> {
    if alpha < 0.0 || beta < 0.0 {
        return Err(DarnetError::InvalidConfig(format!(
            "blend weights must be non-negative, got ({alpha}, {beta})"
        )));
    }
    let blended = blend_prototypes(p_s, p_q_star, alpha, beta)?;
    predict_confidence(&blended, f_q, temperature)
}

/// Output of the first branch: plain support matching and one self-match.
#[derive(Debug, Clone)]
pub struct Branch1 {
    pub support: Prototype,
    pub m0: ConfidenceMap,
    pub query_prototype: Option<Prototype>,
    pub m1: ConfidenceMap,
}

/// Support matching (M0) followed by one self-matching pass (M1).
///
/// When no query pixel clears the thresholds, M1 falls back to M0.
pub fn branch1_forward(
    f_s: &[FeatureMap],
    m_s: &[Array2<u8>],
    f_q: &FeatureMap,
    cfg: &MatchConfig,
) -> Result<Branch1> {
    let shots: Vec<_> = f_s
        .iter()
        .zip(m_s)
        .map(|(f, m)| (f, downsample_mask(m.view(), f.height(), f.width())))
        .collect();
    let views: Vec<_> = shots.iter().map(|(f, m)| (*f, m.view())).collect();
    let support = support_prototype(&views)?;
    let m0 = predict_confidence(&support, f_q, cfg.temperature)?;
    let tm = threshold_filter(&m0, cfg.tau_fg, cfg.tau_bg);
    match build_query_prototype(f_q, &tm) {
        Ok(pq) => {
            let m1 = self_match(&support, &pq, f_q, cfg.alpha, cfg.beta, cfg.temperature)?;
            Ok(Branch1 {
                support,
                m0,
                query_prototype: Some(pq),
                m1,
            })
        }
        Err(DarnetError::DegenerateEpisode(_)) => Ok(Branch1 {
            support,
            m1: m0.clone(),
            m0,
            query_prototype: None,
        }),
        Err(e) => Err(e),
    }
}

/// Reverse-mode helpers for the matching head.
pub(crate) mod grad {
    use super::*;

    /// dL/dz for z = T·(cos_fg − cos_bg) given dL/d(fg probability).
    pub(crate) fn confidence_backward(cm: &ConfidenceMap, d_fg: &Array2<f64>) -> Array2<f64> {
        Zip::from(&cm.fg)
            .and(d_fg)
            .map_collect(|&p, &g| g * p * (1.0 - p))
    }

    /// Gradients of `Σ upstream·cos(p, f)` with respect to `p` and `f`.
    pub(crate) fn cosine_backward(
        p: &Array1<f64>,
        f: &FeatureMap,
        upstream: &Array2<f64>,
    ) -> (Array1<f64>, ndarray::Array3<f64>) {
        let (c, h, w) = f.data().dim();
        let pn = norm(p.view());
        let mut dp = Array1::zeros(c);
        let mut df = ndarray::Array3::zeros((c, h, w));
        for y in 0..h {
            for x in 0..w {
                let g = upstream[[y, x]];
                if g == 0.0 {
                    continue;
                }
                let col = f.column(y, x);
                let fnorm = norm(col);
                let dot = p.dot(&col);
                let d = pn * fnorm + COSINE_EPS;
                let d2 = d * d;
                let kp = if pn > 0.0 {
                    dot * fnorm / (pn * d2)
                } else {
                    0.0
                };
                let kf = if fnorm > 0.0 {
                    dot * pn / (fnorm * d2)
                } else {
                    0.0
                };
                for ch in 0..c {
                    dp[ch] += g * (col[ch] / d - kp * p[ch]);
                    df[[ch, y, x]] += g * (p[ch] / d - kf * col[ch]);
                }
            }
        }
        (dp, df)
    }

    /// Gradients of a prototype-matching prediction with respect to the
    /// prototype halves and (directly) the matched features.
    pub(crate) struct HeadGrad {
        pub fg: Array1<f64>,
        pub bg: Array1<f64>,
        pub df: ndarray::Array3<f64>,
    }

    pub(crate) fn head_backward(
        p: &Prototype,
        f: &FeatureMap,
        cm: &ConfidenceMap,
        d_fg: &Array2<f64>,
        temperature: f64,
    ) -> HeadGrad {
        let dz = confidence_backward(cm, d_fg) * temperature;
        let (fg, mut df) = cosine_backward(&p.fg, f, &dz);
        let (bg, df_b) = cosine_backward(&p.bg, f, &(-&dz));
        df += &df_b;
        HeadGrad { fg, bg, df }
    }

    /// Effective (support, query) weights of each blended half.
    pub(crate) fn blend_coefficients(
        s_valid: bool,
        q_valid: bool,
        alpha: f64,
        beta: f64,
    ) -> (f64, f64) {
        match (s_valid, q_valid) {
            (true, true) => (alpha, beta),
            (true, false) => (1.0, 0.0),
            (false, true) => (0.0, 1.0),
            (false, false) => (0.0, 0.0),
        }
    }

    /// Routes gradients on the support prototype halves back to each shot's
    /// feature map, mirroring [`support_prototype`].
    pub(crate) fn support_prototype_backward(
        shots: &[(&FeatureMap, ArrayView2<'_, u8>)],
        d_fg: &Array1<f64>,
        d_bg: &Array1<f64>,
    ) -> Vec<ndarray::Array3<f64>> {
        let counts: Vec<(usize, usize)> = shots
            .iter()
            .map(|(_, m)| {
                let fg = m.iter().filter(|&&v| v != 0).count();
                (fg, m.len() - fg)
            })
            .collect();
        let nf = counts.iter().filter(|c| c.0 > 0).count().max(1) as f64;
        let nb = counts.iter().filter(|c| c.1 > 0).count().max(1) as f64;
        shots
            .iter()
            .zip(&counts)
            .map(|((f, m), &(cf, cb))| {
                let mut df = ndarray::Array3::zeros(f.data().dim());
                pool_backward(&(d_fg / nf), m.view(), cf, &mut df);
                let inverted = m.mapv(|v| u8::from(v == 0));
                pool_backward(&(d_bg / nb), inverted.view(), cb, &mut df);
                df
            })
            .collect()
    }

    /// Scatters a prototype gradient back onto the pooled pixels.
    pub(crate) fn pool_backward(
        d_proto: &Array1<f64>,
        mask: ArrayView2<'_, u8>,
        count: usize,
        df: &mut ndarray::Array3<f64>,
    ) {
        if count == 0 {
            return;
        }
        let scale = 1.0 / count as f64;
        for ((y, x), &m) in mask.indexed_iter() {
            if m != 0 {
                let mut col = df.slice_mut(ndarray::s![.., y, x]);
                col.scaled_add(scale, d_proto);
            }
        }
    }
}
