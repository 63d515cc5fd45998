from django.apps import AppConfig


class EvalkitConfig(AppConfig):
    name = 'evalkit'
