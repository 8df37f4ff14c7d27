//! Command-line surface. Every option is a string so that flags and config
//! files go through the same parsing in [`crate::config::Settings`].

use std::path::PathBuf;

use clap::{Parser, Subcommand};

macro_rules! options {
    ($(#[$meta:meta])* $name:ident { $($(#[$fmeta:meta])* $field:ident,)* }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Default, clap::Args)]
        pub struct $name {
            /// key=value configuration file; flags take precedence over it
            #[arg(long)]
            pub config: Option<PathBuf>,
            $($(#[$fmeta])* #[arg(long)] pub $field: Option<String>,)*
        }

        impl $name {
            pub const KEYS: &'static [&'static str] = &[$(stringify!($field)),*];

            pub fn pairs(&self) -> Vec<(&'static str, Option<&String>)> {
                vec![$((stringify!($field), self.$field.as_ref())),*]
            }
        }
    };
}

options!(
    /// Options for `fit` and `select`.
    FitArgs {
        /// covariate file with a header of names
        x,
        /// response file
        y,
        /// location file with header dim1[,dim2]
        grid,
        /// wide (n x m matrix) or long (subject,s,y records)
        layout,
        /// quantile level in (0, 1)
        tau,
        /// smoothing parameter for `fit`
        lambda,
        /// comma-separated smoothing grid for `select`
        lambdas,
        /// gaussian, laplace, inverse_quadratic, polynomial or mixture
        kernel,
        /// kernel scale
        sigma,
        /// Laplace scale of the second mixture component
        sigma2,
        /// mixture weight of the Gaussian component
        c1,
        /// mixture weight of the Laplace component
        c2,
        /// polynomial degree
        degree,
        /// output directory
        out,
        /// worker cap (falls back to SQR_THREADS)
        threads,
    }
);

options!(
    /// Options for `pipeline`.
    PipelineArgs {
        x,
        y,
        grid,
        layout,
        /// tau grid: default, start:stop:step or a comma list
        taus,
        lambda,
        /// smoothing grid for GACV selection; overrides `lambda` when set
        lambdas,
        /// select lambda separately at every tau
        per_tau,
        kernel,
        sigma,
        sigma2,
        c1,
        c2,
        degree,
        /// Matérn smoothness
        nu,
        /// copula degrees of freedom or `estimate`
        dof,
        /// location pairs used to estimate the degrees of freedom
        pair_budget,
        /// cressie_wls or genton
        weighting,
        /// draws per covariate row
        n_samples,
        /// covariate file for sampling; defaults to the row `sample_row` of X
        covariates,
        /// training row whose covariates are used for sampling
        sample_row,
        seed,
        out,
        threads,
    }
);

options!(
    /// Options for `sample`.
    SampleArgs {
        /// directory written by `pipeline`
        model,
        /// covariate file, one row per conditioning vector
        covariates,
        n_samples,
        seed,
        out,
        threads,
    }
);

options!(
    /// Options for `simulate`.
    SimulateArgs {
        /// sim1 (additive Gaussian-process errors) or sim2 (Gaussian copula)
        design,
        n,
        m,
        /// sim1 noise: moderate, high or matern
        noise,
        seed,
        out,
        threads,
    }
);

options!(
    /// Options for `benchmark`.
    BenchmarkArgs {
        /// comma-separated NxM sizes, e.g. 50x50,100x100
        sizes,
        /// comma-separated quantile levels
        taus,
        /// repetitions per cell
        reps,
        lambda,
        sigma,
        seed,
        out,
        threads,
    }
);

#[derive(Debug, Parser)]
#[command(name = "sqr", version, about = "Spatial quantile regression with copula-based sampling")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
#[allow(clippy::large_enum_variant)]
pub enum Command {
    /// Fit one quantile level at a fixed smoothing parameter
    Fit(FitArgs),
    /// Pick the smoothing parameter by GACV and fit at the winner
    Select(FitArgs),
    /// Quantile surface, copula, samples and p-values in one run
    Pipeline(PipelineArgs),
    /// Draw curves from a model written by `pipeline`
    Sample(SampleArgs),
    /// Write simulated X.csv, Y.csv and grid.csv
    Simulate(SimulateArgs),
    /// Time the primal-dual solver against ADMM
    Benchmark(BenchmarkArgs),
}
