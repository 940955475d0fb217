use std::path::PathBuf;
use std::str::FromStr;

/// `--subject <path>@<position>`: a subject image and the caption word
/// index (BOS = 0) it stands for.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubjectArg {
    pub path: PathBuf,
    pub position: usize,
}

impl FromStr for SubjectArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (path, pos) = s
            .rsplit_once('@')
            .ok_or_else(|| format!("expected <path>@<position>, got `{s}`"))?;
        if path.is_empty() {
            return Err(format!("empty subject path in `{s}`"));
        }
        let position: usize = pos
            .parse()
            .map_err(|_| format!("position `{pos}` is not a non-negative integer"))?;
        if position == 0 {
            return Err("position 0 is the start token; caption words start at 1".into());
        }
        Ok(SubjectArg {
            path: PathBuf::from(path),
            position,
        })
    }
}

/// Fuse ratio flag: a number in `[0, 1]`.
pub fn parse_alpha(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if !(0.0..=1.0).contains(&v) {
        return Err(format!("alpha must be in [0, 1], got {v}"));
    }
    Ok(v)
}

pub fn parse_non_negative(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if !(v >= 0.0 && v.is_finite()) {
        return Err(format!("expected a finite value >= 0, got {v}"));
    }
    Ok(v)
}

pub fn parse_unit(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if !(0.0..=1.0).contains(&v) {
        return Err(format!("expected a value in [0, 1], got {v}"));
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn subject_args() {
        let a: SubjectArg = "crops/cat.ppm@2".parse().unwrap();
        assert_eq!(a.path, PathBuf::from("crops/cat.ppm"));
        assert_eq!(a.position, 2);
        let b: SubjectArg = "we@ird@5".parse().unwrap();
        assert_eq!(b.path, PathBuf::from("we@ird"));
        for bad in ["x.ppm", "x.ppm@", "@3", "x.ppm@0", "x.ppm@-1", "x.ppm@two"] {
            assert!(bad.parse::<SubjectArg>().is_err(), "{bad}");
        }
    }

    #[test]
    fn alpha_domain() {
        assert_eq!(parse_alpha("0.5"), Ok(0.5));
        assert!(parse_alpha("1.5").is_err());
        assert!(parse_alpha("-0.1").is_err());
        assert!(parse_alpha("NaN").is_err());
    }

    proptest! {
        #[test]
        fn subject_arg_round_trip(path in "[a-z/._@]{1,20}", pos in 1usize..1000) {
            let parsed: SubjectArg = format!("{path}@{pos}").parse().unwrap();
            prop_assert_eq!(parsed.path, PathBuf::from(&path));
            prop_assert_eq!(parsed.position, pos);
        }
    }
}
