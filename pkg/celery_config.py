import logging

from celery import Celery
from celery.signals import after_setup_logger

from config import LOG_FORMAT, get_config

settings = get_config()

# Get Redis URL from configuration
redis_url = settings.CELERY_BROKER_URL
logging.info(f"Using broker URL: {redis_url} (eager: {settings.TASKS_EAGER})")

# Initialize Celery
celery = Celery(
    'cgdsgld',
    broker=redis_url,
    backend=redis_url,
    include=['tasks'],
)

celery.conf.update(
    # Basic settings; payloads are plain lists and dicts
    task_serializer='json',
    accept_content=['json'],
    result_serializer='json',
    timezone='UTC',
    enable_utc=True,

    # In-process execution unless a worker pool is configured
    task_always_eager=settings.TASKS_EAGER,
    task_eager_propagates=True,

    # Task settings
    task_track_started=True,
    task_time_limit=settings.TASK_TIMEOUT,
    task_soft_time_limit=max(1, settings.TASK_TIMEOUT - 300),
    worker_prefetch_multiplier=1,
    worker_max_tasks_per_child=100,

    # Redis connection settings
    broker_connection_retry=True,
    broker_connection_retry_on_startup=True,
    broker_connection_max_retries=100,
    broker_connection_timeout=30,
    broker_pool_limit=10,

    result_backend_transport_options={
        'retry_policy': {
            'timeout': 5.0,
            'max_retries': 3,
        },
        'global_keyprefix': 'cgdsgld_results'
    },
    redis_socket_timeout=30,
    redis_socket_connect_timeout=30,
    redis_retry_on_timeout=True,

    # Chains are CPU bound; one per core
    worker_concurrency=4,
)


def configure_eager(eager=True):
    """Switch dispatch between in-process and broker-backed execution."""
    celery.conf.task_always_eager = eager
    celery.conf.task_eager_propagates = True
    return celery


@after_setup_logger.connect
def setup_loggers(logger, *args, **kwargs):
    """Configure logging for Celery"""
    handler = logging.StreamHandler()
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    logger.addHandler(handler)
    logger.setLevel(logging.INFO)
