from django.apps import AppConfig


class SiteScreeningConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'safety_apps.site_screening'
    verbose_name = 'Site Screening'
