//! Sampler variant descriptions: what to run over the test set and how
//! the outputs are labeled on disk and in metric tables.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::ViewAxis;

use super::config::RunConfig;

/// One evaluable method. `Input` is the degraded input itself (no
/// sampling); everything else produces prediction volumes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Variant {
    Input,
    Prior {
        seed_idx: usize,
    },
    Madm {
        views: Vec<ViewAxis>,
        t_start: usize,
        context_radius: usize,
        seed_idx: usize,
    },
    Mvsd {
        order: Vec<ViewAxis>,
        t_start: usize,
        context_radius: usize,
        seed_idx: usize,
    },
    NoPrior {
        views: Vec<ViewAxis>,
        context_radius: usize,
        seed_idx: usize,
    },
}

fn views_tag(views: &[ViewAxis], sep: char) -> String {
    views.iter().map(|v| v.short_name()).collect::<Vec<_>>().join(&sep.to_string())
}

impl Variant {
    pub fn madm(cfg: &RunConfig, views: Vec<ViewAxis>, t_start: usize, s: usize, seed_idx: usize) -> Variant {
        let mut v = views;
        v.sort();
        let _ = cfg;
        Variant::Madm { views: v, t_start, context_radius: s, seed_idx }
    }

    /// Directory and method label, filesystem-safe and unambiguous.
    pub fn dir_name(&self) -> String {
        match self {
            Variant::Input => "input".into(),
            Variant::Prior { seed_idx } => format!("prior_seed{seed_idx}"),
            Variant::Madm { views, t_start, context_radius, seed_idx } => format!(
                "madm_{}_t{}_s{}_seed{}",
                views_tag(views, '+'),
                t_start,
                context_radius,
                seed_idx
            ),
            Variant::Mvsd { order, t_start, context_radius, seed_idx } => format!(
                "mvsd_{}_t{}_s{}_seed{}",
                views_tag(order, '-'),
                t_start,
                context_radius,
                seed_idx
            ),
            Variant::NoPrior { views, context_radius, seed_idx } => {
                format!("noprior_{}_s{}_seed{}", views_tag(views, '+'), context_radius, seed_idx)
            }
        }
    }

    /// Parses a CLI variant description. Grammar:
    /// `input` | `prior` | `madm` | `mvsd` | `noprior`, optionally
    /// followed by `:key=value` segments with keys `views` (comma list of
    /// co/sa/ax), `order` (mvsd), `t`, `s`, `seed` (seed index).
    pub fn parse(text: &str, cfg: &RunConfig) -> Result<Variant> {
        let mut parts = text.split(':');
        let head = parts.next().unwrap_or_default();
        let mut views: Option<Vec<ViewAxis>> = None;
        let mut order: Option<Vec<ViewAxis>> = None;
        let mut t_start: Option<usize> = None;
        let mut s: Option<usize> = None;
        let mut seed_idx: Option<usize> = None;
        for seg in parts {
            let (key, value) = seg
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("variant segment `{seg}` is not key=value")))?;
            match key {
                "views" => {
                    views = Some(
                        value
                            .split(',')
                            .map(ViewAxis::parse_short)
                            .collect::<Result<Vec<_>>>()?,
                    )
                }
                "order" => {
                    order = Some(
                        value
                            .split(',')
                            .map(ViewAxis::parse_short)
                            .collect::<Result<Vec<_>>>()?,
                    )
                }
                "t" => {
                    t_start = Some(value.parse().map_err(|e| {
                        Error::Config(format!("variant t `{value}` is not an integer: {e}"))
                    })?)
                }
                "s" => {
                    s = Some(value.parse().map_err(|e| {
                        Error::Config(format!("variant s `{value}` is not an integer: {e}"))
                    })?)
                }
                "seed" => {
                    seed_idx = Some(value.parse().map_err(|e| {
                        Error::Config(format!("variant seed `{value}` is not an integer: {e}"))
                    })?)
                }
                other => return Err(Error::Config(format!("unknown variant key `{other}`"))),
            }
        }
        let seed_idx = seed_idx.unwrap_or(0);
        if seed_idx >= cfg.seeds.len() {
            return Err(Error::Config(format!(
                "variant seed index {seed_idx} out of range for {} configured seeds",
                cfg.seeds.len()
            )));
        }
        let s = s.unwrap_or(cfg.context_radius);
        let default_views = || {
            let mut v = cfg.sampler.views.clone();
            v.sort();
            v
        };
        match head {
            "input" => Ok(Variant::Input),
            "prior" => Ok(Variant::Prior { seed_idx }),
            "madm" => {
                let mut v = views.unwrap_or_else(default_views);
                v.sort();
                v.dedup();
                Ok(Variant::Madm {
                    views: v,
                    t_start: t_start.unwrap_or(cfg.sampler.t_start),
                    context_radius: s,
                    seed_idx,
                })
            }
            "mvsd" => {
                let order = order
                    .or(views)
                    .unwrap_or_else(|| cfg.sampler.views.clone());
                Ok(Variant::Mvsd {
                    order,
                    t_start: t_start.unwrap_or(cfg.sampler.t_start),
                    context_radius: s,
                    seed_idx,
                })
            }
            "noprior" => Ok(Variant::NoPrior {
                views: views.unwrap_or_else(default_views),
                context_radius: s,
                seed_idx,
            }),
            other => Err(Error::Config(format!(
                "unknown variant `{other}` (expected input|prior|madm|mvsd|noprior)"
            ))),
        }
    }

    pub fn seed_idx(&self) -> usize {
        match self {
            Variant::Input => 0,
            Variant::Prior { seed_idx }
            | Variant::Madm { seed_idx, .. }
            | Variant::Mvsd { seed_idx, .. }
            | Variant::NoPrior { seed_idx, .. } => *seed_idx,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::config::RunConfig;

    #[test]
    fn parse_and_name_roundtrip() {
        let cfg = RunConfig::desk_preset();
        let v = Variant::parse("madm", &cfg).unwrap();
        assert_eq!(v.dir_name(), "madm_co+sa+ax_t40_s4_seed0");
        let v = Variant::parse("madm:views=ax,co:t=100:s=8:seed=2", &cfg).unwrap();
        assert_eq!(v.dir_name(), "madm_co+ax_t100_s8_seed2");
        let v = Variant::parse("mvsd:order=ax,co,sa", &cfg).unwrap();
        assert_eq!(v.dir_name(), "mvsd_ax-co-sa_t40_s4_seed0");
        let v = Variant::parse("noprior", &cfg).unwrap();
        assert_eq!(v.dir_name(), "noprior_co+sa+ax_s4_seed0");
        assert_eq!(Variant::parse("prior", &cfg).unwrap().dir_name(), "prior_seed0");
        assert!(Variant::parse("bogus", &cfg).is_err());
        assert!(Variant::parse("madm:seed=9", &cfg).is_err());
        assert!(Variant::parse("madm:t=nope", &cfg).is_err());
    }
}
