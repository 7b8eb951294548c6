import json
import logging

import numpy as np
from fastapi import FastAPI, HTTPException
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse

from config import settings
from models.schemas import (
    DensityMatrixPayload,
    ReconstructionResult,
    ReconstructRequest,
    SimulateRequest,
    SimulateResponse,
)
from services.forward import SignalTrace, check_validity, default_time_grid, signal
from services.measure import add_noise, noise_for
from services.qstate import as_density
from services.reconstruct import reconstruction_service
from utils.errors import ModelValidityError, QtomoError
from utils.json_encoder import NumpyJSONEncoder, finite_or_none
from utils.trace_io import load_state

logging.basicConfig(
    level=getattr(logging, settings.log_level.upper(), logging.INFO),
    format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
)
logger = logging.getLogger(__name__)


class NumpyJSONResponse(JSONResponse):
    def render(self, content) -> bytes:
        return json.dumps(
            finite_or_none(content),
            cls=NumpyJSONEncoder,
            ensure_ascii=False,
            allow_nan=False,
            indent=None,
            separators=(",", ":"),
        ).encode("utf-8")


app = FastAPI(
    title="Qutrit Tomography API",
    description="Simulate polarization-rotation signals and reconstruct f=1 ground-state density matrices",
    version="1.0.0",
    default_response_class=NumpyJSONResponse,
)

app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)


def _http_error(e: QtomoError) -> HTTPException:
    if isinstance(e, ModelValidityError):
        return HTTPException(status_code=422, detail={"message": str(e), "flags": e.flags})
    if isinstance(e, ValueError):
        return HTTPException(status_code=400, detail=str(e))
    return HTTPException(status_code=422, detail=str(e))


@app.get("/")
async def root():
    """Health check"""
    return {"status": "ok", "message": "Qutrit Tomography API is running"}


@app.post("/api/simulate", response_model=SimulateResponse)
def simulate(request: SimulateRequest):
    """
    Analytic signal traces for a state and a list of control pulses.

    Noise is added to delta_alpha when snr is given.
    """
    try:
        logger.info(f"Received simulate request: {len(request.pulses)} pulses, snr={request.snr}")
        check_validity(request.probe, force=request.force)

        if isinstance(request.state, DensityMatrixPayload):
            rho = as_density(request.state)
        else:
            if request.state.file is not None:
                raise HTTPException(status_code=400, detail="state files are not accepted over HTTP")
            rho = load_state(request.state, request.seed)

        times = default_time_grid(request.probe)
        noise_seeds = np.random.SeedSequence(request.seed).generate_state(len(request.pulses))
        noise = None
        if request.snr is not None:
            noise = noise_for(request.transition, request.probe, request.snr, 0, times)

        traces = []
        for pulse, noise_seed in zip(request.pulses, noise_seeds):
            trace = signal(rho, pulse, request.transition, request.probe, times, seed=request.seed)
            if noise is not None:
                trace = add_noise(trace, noise.model_copy(update={"seed": int(noise_seed)}))
            traces.append(trace.to_payload())

        logger.info(f"Simulated {len(traces)} traces of {times.size} samples")
        return SimulateResponse(state=rho.to_payload(), traces=traces)

    except HTTPException:
        raise
    except QtomoError as e:
        logger.warning(f"Simulate request rejected: {str(e)}")
        raise _http_error(e)
    except Exception as e:
        logger.error(f"Failed to simulate traces: {str(e)}", exc_info=True)
        raise HTTPException(status_code=500, detail=f"Internal server error: {str(e)}")


@app.post("/api/reconstruct", response_model=ReconstructionResult)
def reconstruct(request: ReconstructRequest):
    """
    Fit each trace, invert the fits and minimize the distance over physical states.

    Pulse, transition and probe of each trace come from its metadata.
    """
    try:
        logger.info(f"Received reconstruct request: {len(request.traces)} traces")
        traces = [SignalTrace.from_payload(payload) for payload in request.traces]
        truth = as_density(request.truth)
        result = reconstruction_service.from_traces(traces, truth=truth, seed=request.seed)
        if not result.converged:
            logger.warning("Reconstruction did not converge; returning best-so-far state")
        return result

    except QtomoError as e:
        logger.warning(f"Reconstruct request rejected: {str(e)}")
        raise _http_error(e)
    except ValueError as e:
        raise HTTPException(status_code=400, detail=str(e))
    except Exception as e:
        logger.error(f"Failed to reconstruct state: {str(e)}", exc_info=True)
        raise HTTPException(status_code=500, detail=f"Internal server error: {str(e)}")


if __name__ == "__main__":
    import uvicorn

    uvicorn.run("main:app", host="0.0.0.0", port=8000, reload=True)
