from django.apps import AppConfig


class SiteDataConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'safety_apps.site_data'
    verbose_name = 'Site Data'
