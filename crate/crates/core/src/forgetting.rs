//! Merging learned parameters back toward their pre-fine-tune values.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::{DenoiserParams, Error, PathPredicate, Result, Stage};

/// Which learned paths to pull back toward the original weights, and how far.
#[derive(Debug, Clone, PartialEq)]
pub struct ForgettingStrategy {
    pub name: String,
    pub forget: PathPredicate,
    pub sigma: f64,
}

pub const BUILTIN_NAMES: [&str; 9] = [
    "none",
    "encoderattn",
    "decoderattn",
    "decoder-keep-cross",
    "decoder-keep-attn",
    "decoder-keep-attn-block2",
    "encoder-all",
    "encoder-keep-attn",
    "encoder-keep-attn-block1",
];

fn half(prefix: &str) -> PathPredicate {
    PathPredicate::Prefix(prefix.into())
}

fn forget_except(prefix: &str, keep: PathPredicate) -> PathPredicate {
    PathPredicate::All(alloc::vec![half(prefix), keep.not()])
}

impl ForgettingStrategy {
    pub fn none() -> Self {
        Self::builtin("none").expect("builtin")
    }

    /// Looks up a builtin strategy (sigma 0).
    pub fn builtin(name: &str) -> Option<Self> {
        let attn = PathPredicate::attention;
        let forget = match name {
            "none" => PathPredicate::Never,
            "encoderattn" | "encoder-keep-attn" => forget_except("encoder.", attn()),
            "decoderattn" | "decoder-keep-attn" => forget_except("decoder.", attn()),
            "decoder-keep-cross" => forget_except("decoder.", PathPredicate::Segment("crossattn".into())),
            "decoder-keep-attn-block2" => {
                forget_except("decoder.", PathPredicate::Any(alloc::vec![attn(), PathPredicate::stage(Stage::Decoder(2))]))
            }
            "encoder-all" => half("encoder."),
            "encoder-keep-attn-block1" => {
                forget_except("encoder.", PathPredicate::Any(alloc::vec![attn(), PathPredicate::stage(Stage::Encoder(1))]))
            }
            _ => return None,
        };
        Some(Self { name: name.into(), forget, sigma: 0.0 })
    }

    /// Parses a builtin name, optionally suffixed `;sigma=<v>`, or
    /// `custom:<glob>,<glob>;sigma=<v>`.
    pub fn parse(spec: &str) -> Result<Self> {
        let spec = spec.trim();
        let (body, sigma) = match spec.split_once(';') {
            Some((body, rest)) => {
                let v = rest
                    .trim()
                    .strip_prefix("sigma=")
                    .ok_or_else(|| Error::StrategySpec(format!("expected sigma=<v> after ';' in {spec:?}")))?;
                let v: f64 = v.trim().parse().map_err(|_| Error::StrategySpec(format!("bad sigma {v:?}")))?;
                (body.trim(), Some(v))
            }
            None => (spec, None),
        };
        let mut strategy = if let Some(globs) = body.strip_prefix("custom:") {
            let globs: Vec<PathPredicate> = globs
                .split(',')
                .map(str::trim)
                .filter(|g| !g.is_empty())
                .map(|g| PathPredicate::Glob(g.into()))
                .collect();
            if globs.is_empty() {
                return Err(Error::StrategySpec("custom strategy needs at least one glob".into()));
            }
            Self { name: body.to_string(), forget: PathPredicate::Any(globs), sigma: 0.0 }
        } else {
            Self::builtin(body).ok_or_else(|| {
                Error::StrategySpec(format!("unknown strategy {body:?}; builtins: {}", BUILTIN_NAMES.join(", ")))
            })?
        };
        if let Some(s) = sigma {
            strategy = strategy.with_sigma(s)?;
        }
        Ok(strategy)
    }

    pub fn with_sigma(mut self, sigma: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&sigma) {
            return Err(Error::StrategySpec(format!("sigma {sigma} outside [0, 1]")));
        }
        self.sigma = sigma;
        Ok(self)
    }

    /// Canonical spec string that [`ForgettingStrategy::parse`] maps back to
    /// this strategy.
    pub fn spec(&self) -> String {
        if self.sigma == 0.0 {
            self.name.clone()
        } else {
            format!("{};sigma={}", self.name, self.sigma)
        }
    }

    /// True when at least one path can be pulled toward the original.
    pub fn forgets(&self, params: &DenoiserParams) -> bool {
        self.sigma < 1.0 && params.paths().any(|p| self.forget.matches(p))
    }
}

/// `w = sigma * learned + (1 - sigma) * original` on the forgotten paths,
/// learned values everywhere else.
pub fn merge_parameters(
    learned: &DenoiserParams,
    original: &DenoiserParams,
    strategy: &ForgettingStrategy,
) -> Result<DenoiserParams> {
    learned.check_same_structure(original)?;
    let s = strategy.sigma;
    let mut out = learned.clone();
    for (path, w) in out.entries_mut() {
        if !strategy.forget.matches(path) {
            continue;
        }
        let orig = original.get(path).expect("same structure");
        if s == 0.0 {
            w.data_mut().copy_from_slice(orig.data());
        } else if s != 1.0 {
            for (a, b) in w.data_mut().iter_mut().zip(orig.data()) {
                *a = s * *a + (1.0 - s) * b;
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct StageCounts {
    pub forgotten: usize,
    pub kept: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StrategyReport {
    pub strategy: String,
    pub sigma: f64,
    /// Keyed by stage prefix, in network order.
    pub stages: Vec<(String, StageCounts)>,
    pub forgotten: usize,
    pub kept: usize,
    /// Largest `|merged - original|` over the forgotten paths.
    pub max_forgotten_delta: f64,
}

/// Path counts per stage and the residual distance of the forgotten paths
/// from the original after merging.
pub fn strategy_report(
    learned: &DenoiserParams,
    original: &DenoiserParams,
    strategy: &ForgettingStrategy,
) -> Result<StrategyReport> {
    let merged = merge_parameters(learned, original, strategy)?;
    let mut per: BTreeMap<String, StageCounts> = BTreeMap::new();
    let mut max_delta: f64 = 0.0;
    for path in learned.paths() {
        let stage = Stage::of_path(path).map(|s| s.prefix()).unwrap_or_default();
        let c = per.entry(stage).or_default();
        if strategy.forget.matches(path) {
            c.forgotten += 1;
            let d = merged.get(path).expect("path").max_abs_diff(original.get(path).expect("path"))?;
            max_delta = max_delta.max(d);
        } else {
            c.kept += 1;
        }
    }
    let stages: Vec<(String, StageCounts)> =
        Stage::all().iter().filter_map(|s| per.remove(&s.prefix()).map(|c| (s.prefix(), c))).collect();
    let forgotten = stages.iter().map(|(_, c)| c.forgotten).sum();
    let kept = stages.iter().map(|(_, c)| c.kept).sum();
    Ok(StrategyReport { strategy: strategy.spec(), sigma: strategy.sigma, stages, forgotten, kept, max_forgotten_delta: max_delta })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::StageLayout;

    fn pair() -> (DenoiserParams, DenoiserParams) {
        let a = DenoiserParams::init(StageLayout::default(), 1).unwrap();
        let b = DenoiserParams::init(StageLayout::default(), 2).unwrap();
        (a, b)
    }

    #[test]
    fn parse_builtins_and_custom() {
        for name in BUILTIN_NAMES {
            assert_eq!(ForgettingStrategy::parse(name).unwrap().name, name);
        }
        let s = ForgettingStrategy::parse("custom:mid.*,decoder.0.*;sigma=0.25").unwrap();
        assert_eq!(s.sigma, 0.25);
        assert!(s.forget.matches("mid.resnet.w1"));
        assert!(!s.forget.matches("decoder.1.resnet.w1"));
        assert_eq!(ForgettingStrategy::parse(&s.spec()).unwrap(), s);
        assert!(ForgettingStrategy::parse("encoderattn;sigma=2").is_err());
        assert!(ForgettingStrategy::parse("bogus").is_err());
        assert!(ForgettingStrategy::parse("custom:").is_err());
    }

    #[test]
    fn midpoint_example() {
        let lay = StageLayout::default();
        let (mut l, mut o) = pair();
        let path = "mid.resnet.b1";
        l.get_mut(path).unwrap().data_mut()[0] = 2.0;
        o.get_mut(path).unwrap().data_mut()[0] = 4.0;
        let s = ForgettingStrategy::parse("custom:mid.resnet.b1;sigma=0.5").unwrap();
        let m = merge_parameters(&l, &o, &s).unwrap();
        assert_eq!(m.get(path).unwrap().data()[0], 3.0);
        assert_eq!(m.layout(), &lay);
    }

    #[test]
    fn sigma_endpoints_are_exact() {
        let (l, o) = pair();
        for name in BUILTIN_NAMES {
            let s = ForgettingStrategy::parse(name).unwrap();
            let m = merge_parameters(&l, &o, &s).unwrap();
            for p in l.paths() {
                let want = if s.forget.matches(p) { o.get(p) } else { l.get(p) };
                assert_eq!(m.get(p), want, "{name} {p}");
            }
            let one = merge_parameters(&l, &o, &s.clone().with_sigma(1.0).unwrap()).unwrap();
            assert_eq!(one, l);
            assert_eq!(merge_parameters(&m, &o, &s).unwrap(), m);
        }
    }

    #[test]
    fn mismatched_structure_is_reported() {
        let (l, _) = pair();
        let small = StageLayout { widths: [8, 8, 16, 16], ..StageLayout::default() };
        let o = DenoiserParams::init(small, 1).unwrap();
        assert!(merge_parameters(&l, &o, &ForgettingStrategy::none()).is_err());
    }

    #[test]
    fn report_counts() {
        let (l, o) = pair();
        let none = strategy_report(&l, &o, &ForgettingStrategy::none()).unwrap();
        assert_eq!(none.forgotten, 0);
        assert_eq!(none.kept, l.entries().len());
        let enc = strategy_report(&l, &o, &ForgettingStrategy::builtin("encoderattn").unwrap()).unwrap();
        let enc_all = l.paths().filter(|p| p.starts_with("encoder.")).count();
        let enc_attn = l.paths().filter(|p| p.starts_with("encoder.") && p.contains("attn.")).count();
        assert_eq!(enc.forgotten, enc_all - enc_attn);
        assert_eq!(enc.max_forgotten_delta, 0.0);
        assert_eq!(enc.stages.len(), 9);
    }
}
