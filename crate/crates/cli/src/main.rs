mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::parser::ValueSource;
use clap::{Arg, ArgMatches, Command};
use fflow::pipeline::config::registry;
use fflow::pipeline::Config;

const SUBCOMMANDS: [(&str, &str); 7] = [
    ("gen-data", "render the synthetic shapes corpus"),
    (
        "train-ae",
        "train the autoencoder decoder (and residual branch)",
    ),
    ("fit-stats", "fit per-channel latent statistics"),
    (
        "train-dit",
        "train the diffusion transformer through its stages",
    ),
    ("sample", "generate images from captions"),
    (
        "analyze",
        "feature PCA, cross-resolution similarity and reconstruction PSNR",
    ),
    (
        "grad-check",
        "finite-difference check of every differentiable op",
    ),
];

fn cli() -> Command {
    let keys = registry();
    let subcommands = SUBCOMMANDS.iter().map(|&(name, about)| {
        let mut cmd = Command::new(name)
            .about(about)
            .arg(
                Arg::new("config")
                    .long("config")
                    .value_name("FILE")
                    .help("`key = value` file applied before flags"),
            )
            .arg(
                Arg::new("out")
                    .long("out")
                    .value_name("DIR")
                    .required(name != "grad-check")
                    .help("output directory"),
            );
        for k in &keys {
            cmd = cmd.arg(
                Arg::new(k.key.clone())
                    .long(k.key.clone())
                    .value_name("VALUE")
                    .help(format!("{} [default: {}]", k.help, k.default)),
            );
        }
        cmd
    });
    Command::new("fflow")
        .about("Text-to-image flow matching in a frozen feature space")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommands(subcommands)
}

fn resolve(m: &ArgMatches) -> fflow::Result<Config> {
    let mut cfg = Config::default();
    if let Some(path) = m.get_one::<String>("config") {
        cfg.apply_file(PathBuf::from(path).as_path())?;
    }
    for k in registry() {
        if m.value_source(&k.key) == Some(ValueSource::CommandLine) {
            if let Some(v) = m.get_one::<String>(&k.key) {
                cfg.set(&k.key, v)?;
            }
        }
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    fflow::parallel::init_from_env();
    let matches = cli().get_matches();
    let (name, m) = matches.subcommand().expect("subcommand is required");
    let run = || -> fflow::Result<()> {
        let cfg = resolve(m)?;
        let out = m.get_one::<String>("out").map(PathBuf::from);
        commands::run(name, &cfg, out.as_deref())
    };
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn command_definition_is_consistent() {
        cli().debug_assert();
    }

    #[test]
    fn flags_override_file_values() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("run.cfg");
        std::fs::write(&file, "seed = 4\nn_images = 3\n").unwrap();
        let m = cli()
            .try_get_matches_from([
                "fflow",
                "gen-data",
                "--out",
                "x",
                "--config",
                file.to_str().unwrap(),
                "--seed",
                "9",
            ])
            .unwrap();
        let cfg = resolve(m.subcommand().unwrap().1).unwrap();
        assert_eq!(cfg.seed().unwrap(), 9);
        assert_eq!(cfg.get::<usize>("n_images").unwrap(), 3);
    }

    #[test]
    fn unknown_flags_are_usage_errors() {
        let err = cli()
            .try_get_matches_from(["fflow", "sample", "--out", "x", "--bogus", "1"])
            .unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
