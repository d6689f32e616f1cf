from django.apps import AppConfig


class CrashModelsConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'safety_apps.crash_models'
    verbose_name = 'Crash Frequency Models'
