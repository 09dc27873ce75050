//! Dataset generation: renders a seeded synthetic benchmark into a
//! directory of image tensors plus labels and manifest.

use std::collections::BTreeMap;
use std::path::PathBuf;

use label2label::synth::{generate, SplitSizes, SynthSpec};
use label2label::{Error, Result};

#[derive(Debug, Clone)]
pub struct Params {
    pub m: usize,
    pub k: usize,
    pub eps: f64,
    pub rho: f64,
    pub image_size: usize,
    pub seed: u64,
    pub n: Option<usize>,
    pub train: Option<usize>,
    pub val: Option<usize>,
    pub test: Option<usize>,
    pub out: PathBuf,
}

fn bad(detail: String) -> Error {
    Error::ConfigError { detail }
}

impl Params {
    fn sizes(&self) -> Result<SplitSizes> {
        match (self.n, self.train, self.val, self.test) {
            (Some(n), None, None, None) => Ok(SplitSizes::standard(n)),
            (None, Some(train), Some(val), Some(test)) => Ok(SplitSizes { train, val, test }),
            _ => Err(bad("give either --n or all three of --train/--val/--test".into())),
        }
    }

    pub fn to_map(&self) -> BTreeMap<String, String> {
        let mut map = BTreeMap::new();
        map.insert("m".into(), self.m.to_string());
        map.insert("k".into(), self.k.to_string());
        map.insert("eps".into(), self.eps.to_string());
        map.insert("rho".into(), self.rho.to_string());
        map.insert("image_size".into(), self.image_size.to_string());
        map.insert("seed".into(), self.seed.to_string());
        if let Some(n) = self.n {
            map.insert("n".into(), n.to_string());
        }
        if let (Some(t), Some(v), Some(te)) = (self.train, self.val, self.test) {
            map.insert("train".into(), t.to_string());
            map.insert("val".into(), v.to_string());
            map.insert("test".into(), te.to_string());
        }
        map.insert("out".into(), self.out.display().to_string());
        map
    }

    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Params> {
        let mut p = Params {
            m: 0,
            k: 0,
            eps: 0.0,
            rho: 0.0,
            image_size: 8,
            seed: 0,
            n: None,
            train: None,
            val: None,
            test: None,
            out: PathBuf::new(),
        };
        for (key, value) in map {
            let parse_count =
                || -> Result<usize> { value.parse().map_err(|_| bad(format!("{key}={value} is not a count"))) };
            match key.as_str() {
                "m" => p.m = parse_count()?,
                "k" => p.k = parse_count()?,
                "eps" => p.eps = value.parse().map_err(|_| bad(format!("eps={value} is not a number")))?,
                "rho" => p.rho = value.parse().map_err(|_| bad(format!("rho={value} is not a number")))?,
                "image_size" => p.image_size = parse_count()?,
                "seed" => p.seed = value.parse().map_err(|_| bad(format!("seed={value} is not an integer")))?,
                "n" => p.n = Some(parse_count()?),
                "train" => p.train = Some(parse_count()?),
                "val" => p.val = Some(parse_count()?),
                "test" => p.test = Some(parse_count()?),
                "out" => p.out = PathBuf::from(value),
                _ => return Err(bad(format!("unknown generate key {key:?}"))),
            }
        }
        Ok(p)
    }
}

pub fn run(p: &Params) -> Result<()> {
    let sizes = p.sizes()?;
    let spec = SynthSpec {
        m: p.m,
        k: p.k,
        attr_map: SynthSpec::contiguous_map(p.m, p.k),
        flip_eps: p.eps,
        occlusion_rho: p.rho,
        image_size: p.image_size,
        seed: p.seed,
    };
    let manifest = generate(&spec, &sizes, &p.out)?;
    println!(
        "wrote {} samples ({} train / {} val / {} test) to {}",
        manifest.samples,
        manifest.splits.train.len(),
        manifest.splits.val.len(),
        manifest.splits.test.len(),
        p.out.display()
    );
    Ok(())
}
