from pydantic_settings import BaseSettings


class Settings(BaseSettings):
    APP_NAME: str = "Adversarial Detection Lab"

    # Raw datasets live under DATA_DIR/<dataset_id>/ (nothing is downloaded)
    DATA_DIR: str = "./data"
    OUT_DIR: str = "./runs"

    LOG_LEVEL: str = "INFO"
    LOG_FORMAT: str = "%(asctime)s %(levelname)s %(name)s: %(message)s"

    # 0 = leave torch's own default
    TORCH_THREADS: int = 0

    # Batch size for deterministic (dropout-off) evaluation passes
    CHUNK_SIZE: int = 256

    # tqdm progress bars on per-sample loops
    PROGRESS: bool = True

    model_config = {"env_file": ".env", "env_prefix": "ADVDETECT_"}


settings = Settings()
