import os
import logging
from dotenv import load_dotenv

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

# Setup logging
logging.basicConfig(
    level=os.environ.get('CGDSGLD_LOG_LEVEL', 'INFO').upper(),
    format=LOG_FORMAT
)

# Load environment variables from .env file
# Managed deployments provide the environment themselves
if not os.environ.get('CGDSGLD_MANAGED'):
    load_dotenv()


def _env_flag(name, default):
    return os.environ.get(name, default).lower() in ('true', '1', 't', 'yes')


class Config:
    """Base configuration."""
    DEBUG = _env_flag('CGDSGLD_DEBUG', 'False')

    # Output location; the only experiment setting the environment may override
    OUTPUT_DIR = os.environ.get('CGDSGLD_OUTPUT_DIR')

    # Numerics
    ENUMERATION_CAP = int(float(os.environ.get('CGDSGLD_ENUMERATION_CAP', 1e6)))
    # Unset means the experiment config's surrogates.jitter applies
    SURROGATE_JITTER = os.environ.get('CGDSGLD_SURROGATE_JITTER')
    SURROGATE_JITTER = float(SURROGATE_JITTER) if SURROGATE_JITTER else None

    # Task dispatch
    CELERY_BROKER_URL = os.environ.get('CELERY_BROKER_URL', 'redis://localhost:6379/0')
    TASKS_EAGER = _env_flag('CGDSGLD_TASKS_EAGER', 'True')
    TASK_TIMEOUT = int(os.environ.get('CGDSGLD_TASK_TIMEOUT', 3600))

    @classmethod
    def init_app(cls):
        """Log the effective configuration."""
        logging.info("Harness initialized with:")
        logging.info(f"- Debug mode: {cls.DEBUG}")
        logging.info(f"- Output directory override: {cls.OUTPUT_DIR or 'none'}")
        logging.info(f"- Enumeration cap: {cls.ENUMERATION_CAP}")
        logging.info(f"- Tasks run eagerly: {cls.TASKS_EAGER}")
        if not cls.TASKS_EAGER:
            logging.info(f"- Celery broker: {cls.CELERY_BROKER_URL}")


class DevelopmentConfig(Config):
    """Development configuration."""
    DEBUG = True

    @classmethod
    def init_app(cls):
        super().init_app()
        logging.info("Running in DEVELOPMENT mode")


class TestingConfig(Config):
    """Configuration used by the test-suite: always in-process, small caps."""
    TASKS_EAGER = True
    OUTPUT_DIR = None

    @classmethod
    def init_app(cls):
        super().init_app()
        logging.info("Running in TESTING mode")


config = {
    'development': DevelopmentConfig,
    'testing': TestingConfig,
    'production': Config,
    'default': DevelopmentConfig
}


def get_config():
    env = os.environ.get('CGDSGLD_ENV', 'development')
    return config.get(env, config['default'])
