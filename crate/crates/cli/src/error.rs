use std::fmt;

use vitkd::distill::DistillError;
use vitkd::nn::NnError;
use vitkd::preprocess::PreprocessError;
use vitkd::synthdata::SynthError;
use vitkd::train::TrainError;

/// A failed command, classified by what the user has to fix.
#[derive(Debug)]
pub enum Failure {
    /// Bad configuration file, flag, or output location. Exit code 2.
    Config(anyhow::Error),
    /// Missing or inconsistent inputs. Exit code 3.
    Data(anyhow::Error),
    /// The run itself failed: divergence, failed sweep cells. Exit code 4.
    Run(anyhow::Error),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Data(_) => 3,
            Failure::Run(_) => 4,
        }
    }

    pub fn config(msg: impl fmt::Display) -> Self {
        Failure::Config(anyhow::anyhow!("{msg}"))
    }

    pub fn data(msg: impl fmt::Display) -> Self {
        Failure::Data(anyhow::anyhow!("{msg}"))
    }

    pub fn run(msg: impl fmt::Display) -> Self {
        Failure::Run(anyhow::anyhow!("{msg}"))
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (kind, e) = match self {
            Failure::Config(e) => ("configuration error", e),
            Failure::Data(e) => ("data error", e),
            Failure::Run(e) => ("run failed", e),
        };
        write!(f, "{kind}: {e:#}")
    }
}

pub type Result<T, E = Failure> = std::result::Result<T, E>;

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Data(e.into())
    }
}

impl From<PreprocessError> for Failure {
    fn from(e: PreprocessError) -> Self {
        match e {
            PreprocessError::Parameter(_) => Failure::Config(e.into()),
            _ => Failure::Data(e.into()),
        }
    }
}

impl From<SynthError> for Failure {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Config(_) => Failure::Config(e.into()),
            _ => Failure::Data(e.into()),
        }
    }
}

impl From<NnError> for Failure {
    fn from(e: NnError) -> Self {
        match e {
            NnError::Config(_) => Failure::Config(e.into()),
            _ => Failure::Data(e.into()),
        }
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) | TrainError::Distill(DistillError::Parameter(_)) => {
                Failure::Config(e.into())
            }
            TrainError::Nn(NnError::Config(_)) => Failure::Config(e.into()),
            TrainError::Contract(_) | TrainError::Preprocess(_) | TrainError::Nn(_) => {
                Failure::Data(e.into())
            }
            _ => Failure::Run(e.into()),
        }
    }
}
