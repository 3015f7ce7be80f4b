import os
from typing import Optional

from dotenv import load_dotenv

load_dotenv()


class Config:
    SECRET_KEY = os.getenv('SECRET_KEY', 'dev-secret-key')
    MAX_CONTENT_LENGTH = int(os.getenv('MAX_CONTENT_LENGTH', 16 * 1024 * 1024))  # 16MB max upload
    # the JSON API is called by scripts, not browsers
    WTF_CSRF_ENABLED = os.getenv('WTF_CSRF_ENABLED', 'false').lower() == 'true'

    # Pipeline settings
    LOG_LEVEL = os.getenv('DAG_LOG_LEVEL', 'INFO').upper()
    DEVICE = os.getenv('DAG_DEVICE', 'cpu')
    CHECKPOINT = os.getenv('DAG_CHECKPOINT')

    @staticmethod
    def seed_override() -> Optional[int]:
        """``DAG_SEED`` read at call time, so it wins over any config file seed."""
        value = os.getenv('DAG_SEED')
        return int(value) if value not in (None, '') else None
