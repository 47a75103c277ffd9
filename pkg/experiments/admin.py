from django.contrib import admin

from .models import ExperimentRun, RunArtifact


class RunArtifactInline(admin.TabularInline):
    model = RunArtifact
    extra = 0
    readonly_fields = ("path", "kind", "created_at")


@admin.register(ExperimentRun)
class ExperimentRunAdmin(admin.ModelAdmin):
    list_display = ("id", "command", "config_hash", "seed", "status", "verdict", "created_at")
    list_filter = ("command", "status", "verdict")
    search_fields = ("config_hash",)
    ordering = ("-created_at",)
    inlines = [RunArtifactInline]
