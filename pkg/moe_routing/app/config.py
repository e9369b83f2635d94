import os
from dotenv import load_dotenv

load_dotenv()


class Settings:
    # Logging
    LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO")

    # Output settings
    OUTPUT_DIR = os.getenv("OUTPUT_DIR", "results")

    # Training settings
    NUM_WORKERS = int(os.getenv("NUM_WORKERS", "1"))
    DEFAULT_SEED = int(os.getenv("DEFAULT_SEED", "42"))

    # Numerical tolerance for row-stochastic checks
    SCORE_TOLERANCE = float(os.getenv("SCORE_TOLERANCE", "1e-6"))

    # MLflow settings (tracking disabled when the URI is empty)
    MLFLOW_TRACKING_URI = os.getenv("MLFLOW_TRACKING_URI", "")
    MLFLOW_EXPERIMENT_NAME = os.getenv("MLFLOW_EXPERIMENT_NAME", "SeqTopK_Routing_Lab")


settings = Settings()
