//! Central finite-difference verification of analytic gradients.

use super::{AdError, ParamStore, Tensor};
use std::collections::BTreeMap;
use std::fmt;

/// A model whose scalar loss can be evaluated with and without analytic
/// gradients. The loss must be deterministic given the parameter values
/// (fixed noise, fixed dropout masks).
pub trait GradCheckModel {
    type Error: fmt::Display;

    fn loss(&self, params: &ParamStore) -> Result<f64, Self::Error>;

    fn loss_and_grads(
        &self,
        params: &ParamStore,
    ) -> Result<(f64, BTreeMap<String, Tensor>), Self::Error>;
}

/// Adapter so a pair of closures can act as a [`GradCheckModel`].
pub struct FnModel<V, G> {
    pub value: V,
    pub grads: G,
}

impl<V, G, E> GradCheckModel for FnModel<V, G>
where
    V: Fn(&ParamStore) -> Result<f64, E>,
    G: Fn(&ParamStore) -> Result<(f64, BTreeMap<String, Tensor>), E>,
    E: fmt::Display,
{
    type Error = E;

    fn loss(&self, params: &ParamStore) -> Result<f64, E> {
        (self.value)(params)
    }

    fn loss_and_grads(&self, params: &ParamStore) -> Result<(f64, BTreeMap<String, Tensor>), E> {
        (self.grads)(params)
    }
}

/// Worst-offending entry of a gradient check.
#[derive(Clone, Debug)]
pub struct WorstEntry {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub entries_checked: usize,
    pub worst: Option<WorstEntry>,
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "checked {} entries, max relative error {:.3e}",
            self.entries_checked, self.max_rel_err
        )?;
        if let Some(w) = &self.worst {
            write!(
                f,
                " (worst: {}[{}] analytic {:.6e} vs numeric {:.6e})",
                w.name, w.index, w.analytic, w.numeric
            )?;
        }
        Ok(())
    }
}

/// Compare analytic gradients against central differences with step `h`
/// for every entry of every parameter. Relative error per entry is
/// `|g_ad - g_fd| / max(1, |g_ad|, |g_fd|)`.
pub fn grad_check<M: GradCheckModel>(
    model: &M,
    params: &ParamStore,
    h: f64,
) -> Result<GradCheckReport, String> {
    if !(1e-6..=1e-3).contains(&h) {
        return Err(AdError::BadStepSize(h).to_string());
    }
    let (_, analytic) = model
        .loss_and_grads(params)
        .map_err(|e| format!("analytic gradient evaluation failed: {}", e))?;

    let mut work = params.clone();
    let mut max_rel_err = 0.0f64;
    let mut entries_checked = 0usize;
    let mut worst = None;

    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in &names {
        let base = params.get(name).expect("name from store").clone();
        let g_ad_tensor = analytic.get(name).cloned();
        for idx in 0..base.numel() {
            let x0 = base.data()[idx];
            work.get_mut(name).unwrap().data_mut()[idx] = x0 + h;
            let f_plus = model
                .loss(&work)
                .map_err(|e| format!("loss at {}[{}]+h failed: {}", name, idx, e))?;
            work.get_mut(name).unwrap().data_mut()[idx] = x0 - h;
            let f_minus = model
                .loss(&work)
                .map_err(|e| format!("loss at {}[{}]-h failed: {}", name, idx, e))?;
            work.get_mut(name).unwrap().data_mut()[idx] = x0;

            let g_fd = (f_plus - f_minus) / (2.0 * h);
            let g_ad = g_ad_tensor.as_ref().map_or(0.0, |t| t.data()[idx]);
            let rel = (g_ad - g_fd).abs() / 1.0f64.max(g_ad.abs()).max(g_fd.abs());
            entries_checked += 1;
            if rel > max_rel_err {
                max_rel_err = rel;
                worst = Some(WorstEntry {
                    name: name.clone(),
                    index: idx,
                    analytic: g_ad,
                    numeric: g_fd,
                });
            }
        }
    }

    Ok(GradCheckReport {
        max_rel_err,
        entries_checked,
        worst,
    })
}
