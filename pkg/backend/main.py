"""
FastAPI Backend for the COIN motion/camera estimator

This module exposes dataset generation, prior fitting, optimization and
evaluation as REST endpoints. Every endpoint is a thin wrapper over the
functions in backend.commands, so runs started here are identical to runs
started from the command line.
"""

from fastapi import FastAPI, HTTPException
from fastapi.middleware.cors import CORSMiddleware
from pydantic import BaseModel, Field
from typing import Dict, Any, Optional, Union
import logging
import os
from pathlib import Path
import sys

# Load environment variables from parent directory
from dotenv import load_dotenv
parent_dir = Path(__file__).parent.parent
env_file = parent_dir / '.env'
if env_file.exists():
    load_dotenv(env_file)

sys.path.append(str(parent_dir))

from config.schemas import RunConfig, ScenarioConfig
from config.settings import Method, settings
from backend.commands import cmd_evaluate, cmd_fit_prior, cmd_gen, cmd_optimize
from utils.errors import CoinError, ConfigError, NumericalError, StorageError

settings.reload()

# Configure logging
logging.basicConfig(level=settings.log_level)
logger = logging.getLogger(__name__)

# Initialize FastAPI app
app = FastAPI(
    title="COIN Motion Estimation API",
    description="API for generating synthetic scenes, fitting motion priors and running joint human/camera optimization",
    version="1.0.0"
)

origins = ["*"] if os.getenv("ENVIRONMENT", "development") == "development" else [
    "http://localhost:8501",
    "http://localhost:3000"
]

app.add_middleware(
    CORSMiddleware,
    allow_origins=origins,
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)


# Pydantic models for request/response
class GenerateRequest(BaseModel):
    scenario: Union[ScenarioConfig, str]
    seed: int = 0
    output_dir: Optional[str] = None


class FitPriorRequest(BaseModel):
    output: str
    components: int = Field(8, ge=1)
    seed: int = 0
    dataset: Optional[str] = None
    corpus_size: int = Field(512, ge=1)
    n_frames: int = Field(128, ge=3)
    covariance_type: str = "diag"


class EvaluateRequest(BaseModel):
    run_dir: str
    ground_truth: Optional[str] = None


class CommandResponse(BaseModel):
    success: bool
    result: Dict[str, Any]
    message: str


def _http_error(error: Exception) -> HTTPException:
    """Translate a pipeline error into an HTTP status."""
    if isinstance(error, ConfigError):
        return HTTPException(status_code=422, detail=str(error))
    if isinstance(error, StorageError):
        missing = isinstance(error.__cause__, FileNotFoundError) or "not found" in str(error)
        return HTTPException(status_code=404 if missing else 500, detail=str(error))
    if isinstance(error, NumericalError):
        return HTTPException(status_code=500, detail=f"numerical failure: {error}")
    return HTTPException(status_code=500, detail=str(error))


@app.get("/")
async def root():
    """Root endpoint providing API information."""
    return {
        "message": "COIN Motion Estimation API",
        "version": "1.0.0",
        "endpoints": {
            "generate": "POST /generate - Generate a synthetic dataset from a scenario",
            "fit_prior": "POST /fit_prior - Fit the Gaussian-mixture motion prior",
            "optimize": "POST /optimize - Run an optimization method on a dataset",
            "evaluate": "POST /evaluate - Compute metrics for a run directory",
            "status": "GET /status - Get service status"
        }
    }


@app.get("/health")
async def health_check():
    """Simple health check endpoint for deployment platforms."""
    return {"status": "healthy", "service": "coin-motion-estimation"}


@app.get("/status")
async def get_status():
    """Get settings and available methods."""
    try:
        return {
            "status": "healthy",
            "settings": settings.get_info(),
            "methods": {method.value: method.describe() for method in Method},
            "system": {
                "environment": os.getenv("ENVIRONMENT", "development"),
                "port": os.getenv("PORT", "8000"),
                "python_version": sys.version.split()[0]
            }
        }
    except Exception as e:
        logger.error(f"Error getting status: {str(e)}")
        return {
            "status": "error",
            "error": str(e)
        }


@app.post("/generate", response_model=CommandResponse)
async def generate_dataset(request: GenerateRequest):
    """Generate ground truth and observations for a scenario."""
    try:
        result = cmd_gen(request.scenario, request.seed, request.output_dir)
        return CommandResponse(success=True, result=result, message=f"Dataset written to {result['directory']}")
    except CoinError as e:
        logger.error(f"Error in generate_dataset: {str(e)}")
        raise _http_error(e)
    except Exception as e:
        logger.error(f"Error in generate_dataset: {str(e)}")
        raise HTTPException(status_code=500, detail=str(e))


@app.post("/fit_prior", response_model=CommandResponse)
async def fit_prior(request: FitPriorRequest):
    """Fit the motion prior on a corpus."""
    try:
        result = cmd_fit_prior(request.components, request.seed, request.output, dataset=request.dataset,
                               corpus_size=request.corpus_size, n_frames=request.n_frames,
                               covariance_type=request.covariance_type)
        return CommandResponse(success=True, result=result,
                               message=f"Prior fitted with mean log-likelihood {result['log_likelihood']:.4f}")
    except CoinError as e:
        logger.error(f"Error in fit_prior: {str(e)}")
        raise _http_error(e)
    except Exception as e:
        logger.error(f"Error in fit_prior: {str(e)}")
        raise HTTPException(status_code=500, detail=str(e))


@app.post("/optimize", response_model=CommandResponse)
async def optimize(request: RunConfig):
    """
    Run one method (or COIN ablation) and write the run directory.

    The request body is a run config; a missing prior falls back to
    COIN_DEFAULT_PRIOR.
    """
    try:
        result = cmd_optimize(request)
        return CommandResponse(success=True, result=result, message=f"Run written to {result['run_dir']}")
    except CoinError as e:
        logger.error(f"Error in optimize: {str(e)}")
        raise _http_error(e)
    except Exception as e:
        logger.error(f"Error in optimize: {str(e)}")
        raise HTTPException(status_code=500, detail=str(e))


@app.post("/evaluate", response_model=CommandResponse)
async def evaluate(request: EvaluateRequest):
    """Compute the metrics report of a run directory."""
    try:
        result = cmd_evaluate(request.run_dir, request.ground_truth)
        return CommandResponse(success=True, result=result, message="Metrics written")
    except CoinError as e:
        logger.error(f"Error in evaluate: {str(e)}")
        raise _http_error(e)
    except Exception as e:
        logger.error(f"Error in evaluate: {str(e)}")
        raise HTTPException(status_code=500, detail=str(e))


if __name__ == "__main__":
    import uvicorn

    try:
        port = int(os.getenv("PORT", 8000))
        environment = os.getenv("ENVIRONMENT", "development")

        logger.info(f"🚀 Starting COIN Motion Estimation Backend")
        logger.info(f"📊 Environment: {environment}")
        logger.info(f"🌐 Port: {port}")
        logger.info(f"📁 Output root: {settings.output_root}")

        if port <= 0 or port > 65535:
            logger.error(f"❌ Invalid port number: {port}")
            sys.exit(1)

        uvicorn.run(
            "backend.main:app",
            host="0.0.0.0",
            port=port,
            reload=environment != "production",
            log_level="info",
            access_log=True,
            timeout_keep_alive=30
        )

    except ValueError as e:
        logger.error(f"❌ Port configuration error: {e}")
        logger.error("💡 Ensure PORT environment variable is a valid integer")
        sys.exit(1)
    except Exception as e:
        logger.error(f"❌ Failed to start server: {e}")
        sys.exit(1)
