use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vik_core::backbone::NUM_STAGES;
use vik_core::kan::curve::{curvature_sign_changes, curve_csv, phi_curve_table, CurveGrid};
use vik_core::training::{load_checkpoint, LoadOptions};
use vik_core::Error;

use crate::commands::write_file;
use crate::{Context, DumpPhiArgs, Failure};

/// Parses `i,j;k,l` or `sample:K` into `(input, output)` pairs of a width-`f`
/// layer. Sampling draws distinct edges and returns them sorted.
pub fn parse_edges(spec: &str, f: usize, seed: u64) -> Result<Vec<(usize, usize)>, Error> {
    let range = || format!("valid inputs and outputs are 0..{f} ({} edges)", f * f);
    if let Some(k) = spec.strip_prefix("sample:") {
        let k: usize = k
            .trim()
            .parse()
            .ok()
            .filter(|&k| k > 0)
            .ok_or_else(|| Error::Config(format!("bad edge sample count in {spec:?}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = rand::seq::index::sample(&mut rng, f * f, k.min(f * f)).into_vec();
        idx.sort_unstable();
        return Ok(idx.into_iter().map(|e| (e / f, e % f)).collect());
    }
    let mut edges = Vec::new();
    for pair in spec.split(';').map(str::trim).filter(|p| !p.is_empty()) {
        let nums: Vec<Option<usize>> = pair.split(',').map(|t| t.trim().parse().ok()).collect();
        let (i, j) = match nums[..] {
            [Some(i), Some(j)] => (i, j),
            _ => return Err(Error::Config(format!("edge {pair:?} is not of the form i,j"))),
        };
        if i >= f || j >= f {
            return Err(Error::Config(format!("edge ({i},{j}) out of range; {}", range())));
        }
        edges.push((i, j));
    }
    if edges.is_empty() {
        return Err(Error::Config(format!("no edges selected by {spec:?}; {}", range())));
    }
    Ok(edges)
}

pub fn dump_phi(a: &DumpPhiArgs) -> Result<u8, Failure> {
    let ck = load_checkpoint(&a.checkpoint, &LoadOptions::default()).during("checkpoint")?;
    if a.stage == 0 || a.stage > NUM_STAGES {
        return Err(Error::Config(format!("stage {} out of range; valid stages are 1..={NUM_STAGES}", a.stage))).during("cli");
    }
    let blocks = &ck.model.stages[a.stage - 1];
    let block = blocks.get(a.block).ok_or_else(|| {
        Error::Config(format!(
            "block {} out of range; valid blocks of stage {} are 0..{}",
            a.block,
            a.stage,
            blocks.len()
        ))
    });
    let block = block.during("cli")?;
    let groups = &block.mixer.kan;
    let layer = groups
        .get(a.group)
        .ok_or_else(|| Error::Config(format!("group {} out of range; valid groups are 0..{}", a.group, groups.len())))
        .during("cli")?;
    let edges = parse_edges(&a.edges, layer.dim(), a.seed).during("cli")?;
    let grid = CurveGrid::parse(&a.grid).during("cli")?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e)).during("cli")?;

    let basis = layer.spec().kind;
    let mut manifest = String::from("file,stage,block,group,input,output,basis,points,curvature_sign_changes\n");
    let mut total_changes = 0usize;
    for &(i, o) in &edges {
        let rows = phi_curve_table(layer, i, o, grid).during("kan")?;
        let name = format!("phi_s{}_b{}_g{}_e{i}_{o}.csv", a.stage, a.block, a.group);
        write_file(&a.out.join(&name), &curve_csv(&rows))?;
        let changes = curvature_sign_changes(&rows);
        total_changes += changes;
        let _ = writeln!(
            manifest,
            "{name},{},{},{},{i},{o},{basis},{},{changes}",
            a.stage, a.block, a.group, grid.points
        );
    }
    write_file(&a.out.join("manifest.csv"), &manifest)?;
    println!(
        "wrote {} curves to {}; mean curvature sign changes {:.3}",
        edges.len(),
        a.out.display(),
        total_changes as f64 / edges.len() as f64
    );
    Ok(0)
}
